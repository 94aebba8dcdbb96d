"""Command line: ``moecgan {synth,train,generate,complete,eval,mesh,ablate}``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 missing
input file, 3 numeric abort (non-finite loss; a state dump is written).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigError, PROFILES, RunConfig, load_config
from .experiment import (
    ablation,
    build_model,
    build_trainer,
    complete_grids,
    generate_grids,
    occlusion_sweep,
    train_run,
)
from .gan import NumericAbort
from .mesh import marching_cubes, write_obj
from .metrics import evaluate_pair, markdown_table, write_metric_csv
from .train import ShapeSet, dump_json, load_model_state, load_trainer
from .voxel import VoxelGrid, VoxFormatError, read_vox, write_vox

log = logging.getLogger("moecgan")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3


class MissingInput(FileNotFoundError):
    pass


def _require(path: str | Path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(str(p))
    return p


def _config(args) -> RunConfig:
    path = None if args.config is None else _require(args.config)
    return load_config(path, args.set or [], args.profile)


def _config_from_checkpoint(args) -> tuple[RunConfig, Path]:
    ckpt = _require(args.checkpoint)
    manifest, _ = checkpoint.load(ckpt)
    cfg = RunConfig.from_dict(manifest.get("config", {}))
    for o in args.set or []:
        cfg.override(o)
    return cfg.validate(), ckpt


# -- dataset I/O ------------------------------------------------------------------------

def write_dataset(data: ShapeSet, out: Path, cfg: RunConfig) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    train = set(int(i) for i in data.train_idx)
    shapes = []
    for i, (g, fam, seed) in enumerate(zip(data.grids, data.families, data.seeds)):
        name = f"shape_{i:04d}.vox"
        write_vox(g, out / name, binary=True)
        shapes.append({"file": name, "family": fam, "seed": int(seed), "split": "train" if i in train else "test"})
    manifest = {
        "seed": cfg.data.seed,
        "resolution": cfg.data.resolution,
        "n_train": len(data.train_idx),
        "n_test": len(data.test_idx),
        "shapes": shapes,
    }
    dump_json(manifest, out / "manifest.json")
    return manifest


def read_dataset(root: Path) -> ShapeSet:
    manifest = json.loads(_require(root / "manifest.json").read_text())
    grids, fams, seeds, train, test = [], [], [], [], []
    for i, s in enumerate(manifest["shapes"]):
        grids.append(read_vox(_require(root / s["file"])))
        fams.append(s["family"])
        seeds.append(s["seed"])
        (train if s["split"] == "train" else test).append(i)
    return ShapeSet(grids, fams, seeds, np.array(train, dtype=np.int64), np.array(test, dtype=np.int64))


# -- subcommands ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .train import synthesize_dataset

    cfg = _config(args)
    out = Path(args.out or cfg.data.dir)
    data = synthesize_dataset(cfg.data.n_shapes, cfg.data.resolution, cfg.data.seed, tuple(cfg.data.families))
    m = write_dataset(data, out, cfg)
    print(f"wrote {len(m['shapes'])} shapes ({m['n_train']} train / {m['n_test']} test) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    run = Path(args.run_dir or cfg.run_dir)
    data = read_dataset(Path(args.data or cfg.data.dir))
    trainer = build_trainer(cfg)
    if args.resume:
        load_trainer(trainer, _require(args.resume))
    try:
        res = train_run(cfg, data, run, trainer)
    except NumericAbort as exc:
        run.mkdir(parents=True, exist_ok=True)
        dump = {"error": str(exc), "diagnostics": _jsonable(exc.diagnostics)}
        dump_json(dump, run / "abort_state.json")
        print(f"numeric abort: {exc} (state written to {run / 'abort_state.json'})", file=sys.stderr)
        return EXIT_NUMERIC
    t = res.trainer
    print(f"trained {t.dcc.iteration} iterations; U_avg={np.round(t.dcc.u_avg, 4).tolist()}; checkpoints in {run}")
    return EXIT_OK


def _load_model(args):
    cfg, ckpt = _config_from_checkpoint(args)
    model = build_model(cfg)
    manifest = load_model_state(model, ckpt)
    if cfg.routing.infer_tau is None:
        cfg.routing.infer_tau = float(manifest["dcc"]["tau"])
    return cfg, model


def _export(values: np.ndarray, path: Path, obj: bool) -> None:
    grid = VoxelGrid(np.clip(values, 0.0, 1.0).astype(np.float64))
    write_vox(grid, path, binary=False)
    if obj:
        write_obj(marching_cubes(grid, 0.5), path.with_suffix(".obj"))


def cmd_generate(args) -> int:
    cfg, model = _load_model(args)
    if cfg.train.task != "generation":
        log.warning("checkpoint was trained for completion; generating with an empty partial input")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.train.task == "generation":
        grids = generate_grids(model, cfg, args.count, args.seed)
    else:
        R = cfg.data.resolution
        grids = complete_grids(model, cfg, np.zeros((args.count, R, R, R)), args.seed)
    for i, g in enumerate(grids):
        _export(g, out / f"generated_{i:04d}.vox", args.obj)
    print(f"wrote {len(grids)} shapes to {out}")
    return EXIT_OK


def cmd_complete(args) -> int:
    cfg, model = _load_model(args)
    partial = read_vox(_require(args.partial))
    if partial.resolution != cfg.data.resolution:
        raise ConfigError("partial", f"resolution {partial.resolution} differs from model resolution {cfg.data.resolution}")
    out = complete_grids(model, cfg, partial.binarize().values[None].astype(np.float64), args.seed)[0]
    path = Path(args.out)
    _export(out, path, args.obj)
    print(f"completed shape written to {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.occlusion_sweep:
        if not args.checkpoint:
            raise ConfigError("checkpoint", "--occlusion-sweep needs --checkpoint")
        cfg, model = _load_model(args)
        data = read_dataset(Path(args.data or cfg.data.dir))
        test = [data.grids[i] for i in data.test_idx]
        ratios = parse_sweep(args.occlusion_sweep)
        rows = occlusion_sweep(model, cfg, test, ratios, args.mode)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metric_csv(out / "sweep.csv", [dict(r, id=r["label"], mode=args.mode or cfg.eval.occlusion_mode) for r in rows])
        (out / "sweep.md").write_text(markdown_table(rows, "label", "Completion error versus occlusion"))
        print(markdown_table(rows, "label", "Completion error versus occlusion"))
        return EXIT_OK
    if not args.pairs:
        raise ConfigError("pairs", "give --pairs manifest or --occlusion-sweep")
    cfg = _config(args) if args.config or args.set else RunConfig()
    manifest_path = _require(args.pairs)
    root = manifest_path.parent
    pairs = json.loads(manifest_path.read_text())
    rows = []
    e = cfg.eval
    for j, p in enumerate(pairs):
        truth = read_vox(_require(root / p["truth"]))
        output = read_vox(_require(root / p["output"]))
        partial = read_vox(_require(root / p["partial"])) if p.get("partial") else None
        rep = evaluate_pair(truth, output, partial, e.n_points, e.seed + j, e.threshold, e.emd_points)
        rows.append({"id": p.get("id", j), "cd": rep.cd, "hd": rep.hd, "emd": rep.emd, "prr": rep.prr,
                     "occlusion_ratio": p.get("occlusion_ratio"), "mode": p.get("mode"), "label": p.get("id", j)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metric_csv(out / "metrics.csv", rows)
    (out / "metrics.md").write_text(markdown_table(rows, "label", "Per-shape metrics"))
    print(f"evaluated {len(rows)} pairs; results in {out}")
    return EXIT_OK


def cmd_mesh(args) -> int:
    grid = read_vox(_require(args.input))
    mesh = marching_cubes(grid, args.iso)
    write_obj(mesh, args.out)
    print(f"{mesh.n_vertices} vertices, {mesh.n_triangles} triangles -> {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    experts = [int(v) for v in args.experts.split(",")]
    data = read_dataset(Path(args.data)) if args.data else None
    _, report = ablation(cfg, experts, data, args.out)
    print(report)
    return EXIT_OK


def parse_sweep(spec: str) -> list[float]:
    """``"10..90 step 10"`` or ``"10,30,50"`` (percent) -> ratios."""
    spec = spec.strip()
    if ".." in spec:
        rng, _, step = spec.partition("step")
        lo, hi = (float(v) for v in rng.split(".."))
        step = float(step) if step.strip() else 10.0
        vals = np.arange(lo, hi + step / 2, step)
    else:
        vals = [float(v) for v in spec.split(",")]
    ratios = [round(v / 100.0, 6) for v in vals]
    if not all(0 < r <= 0.95 for r in ratios):
        raise ConfigError("occlusion-sweep", f"percentages must lie in (0, 95], got {spec!r}")
    return ratios


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moecgan", description="Mixture-of-experts voxel GAN toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON config file")
            sp.add_argument("--profile", choices=PROFILES, default="desk")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")

    sp = sub.add_parser("synth", help="write a procedural VOX1 dataset")
    common(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model on a dataset directory")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--run-dir")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="sample shapes from a checkpoint")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--count", type=int, default=4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--obj", action="store_true", help="also write OBJ meshes")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("complete", help="complete a partial VOX1 grid")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--partial", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--obj", action="store_true")
    sp.set_defaults(func=cmd_complete)

    sp = sub.add_parser("eval", help="metrics for a pairs manifest, or an occlusion sweep")
    common(sp)
    sp.add_argument("--pairs", help="JSON list of {id, truth, output, partial?}")
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--occlusion-sweep", help='percent range, e.g. "10..90 step 10"')
    sp.add_argument("--mode", choices=("random-cells", "half-space", "spherical-blob"))
    sp.add_argument("--out", default="eval")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("mesh", help="marching-cubes OBJ export of a VOX1 grid")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iso", type=float, default=0.5)
    sp.set_defaults(func=cmd_mesh)

    sp = sub.add_parser("ablate", help="train and evaluate several expert counts")
    common(sp)
    sp.add_argument("--experts", default="1,4,8")
    sp.add_argument("--data")
    sp.add_argument("--out", default="ablation")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except MissingInput as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, VoxFormatError, checkpoint.CheckpointError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
