"""End-to-end helpers shared by the command line and the test-suite."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dcc import DccLog
from .gan import MoECGAN, NumericAbort, Trainer, infer, route_batch
from .metrics import MetricReport, evaluate_pair, markdown_table, routing_consistency, summarize
from .tensor import default_dtype
from .train import LossLog, ShapeSet, fit, save_trainer, synthesize_dataset
from .voxel import VoxelGrid, apply_occlusion

__all__ = [
    "build_model",
    "build_trainer",
    "train_run",
    "complete_grids",
    "evaluate_completion",
    "occlusion_sweep",
    "ablation",
    "TrainResult",
]


def build_model(cfg: RunConfig) -> MoECGAN:
    with default_dtype(cfg.dtype):
        return MoECGAN(
            cfg.arch(),
            cfg.model.n_experts,
            gating_hidden=tuple(cfg.model.gating_hidden),
            use_features=cfg.model.use_features,
            seed=cfg.model.seed,
        )


def build_trainer(cfg: RunConfig, model: MoECGAN | None = None) -> Trainer:
    model = model or build_model(cfg)
    return Trainer(model, cfg.dcc_config(), cfg.train_settings(), seed=cfg.train.seed)


@dataclass
class TrainResult:
    trainer: Trainer
    reports: list
    nonfinite: bool = False


def train_run(
    cfg: RunConfig,
    data: ShapeSet | None = None,
    run_dir: str | Path | None = None,
    trainer: Trainer | None = None,
    max_iterations: int | None = None,
) -> TrainResult:
    """Train on the split's training shapes; writes logs and checkpoints when ``run_dir`` is given."""
    data = data or synthesize_dataset(cfg.data.n_shapes, cfg.data.resolution, cfg.data.seed, tuple(cfg.data.families))
    trainer = trainer or build_trainer(cfg)
    x = data.array(data.train_idx, cfg.dtype)
    dcc_log = loss_log = None
    hook = None
    if run_dir is not None:
        run = Path(run_dir)
        run.mkdir(parents=True, exist_ok=True)
        cfg.save(run / "config.resolved.json")
        dcc_log = DccLog(run / "dcc_log.csv", cfg.model.n_experts)
        loss_log = LossLog(run / "losses.csv")
        every = cfg.train.checkpoint_every

        def hook(epoch: int) -> None:
            if (epoch + 1) % every == 0 or epoch + 1 == cfg.train.epochs:
                save_trainer(trainer, run / f"ckpt_epoch{epoch + 1:04d}.mckp", cfg.to_dict())
                save_trainer(trainer, run / "last.mckp", cfg.to_dict())

    with default_dtype(cfg.dtype):
        reports = fit(
            trainer, x, cfg.train.epochs, cfg.train.batch_size, cfg.train.seed,
            dcc_log=dcc_log, loss_log=loss_log, on_epoch_end=hook, max_iterations=max_iterations,
        )
    bad = any(not np.all(np.isfinite(r.losses())) for r in reports)
    return TrainResult(trainer, reports, bad)


def _infer_tau(cfg: RunConfig) -> float:
    return cfg.routing.infer_tau if cfg.routing.infer_tau is not None else cfg.dcc.tau_final


def complete_grids(model: MoECGAN, cfg: RunConfig, partials: np.ndarray, seed: int, counter: dict | None = None) -> np.ndarray:
    """Complete ``[B,R,R,R]`` partial grids; returns ``[B,R,R,R]`` values in ``[0,1]``."""
    dt = cfg.dtype
    B = len(partials)
    z = np.random.default_rng([seed, B]).standard_normal((B, cfg.model.latent_dim)).astype(dt)
    with default_dtype(dt):
        out = infer(
            model, z, partials.astype(dt)[:, None], tau=_infer_tau(cfg), k=cfg.routing.k,
            renormalize=cfg.routing.renormalize, mode=cfg.routing.infer_mode, counter=counter,
        )
    return out[:, 0]


def generate_grids(model: MoECGAN, cfg: RunConfig, count: int, seed: int) -> np.ndarray:
    dt = cfg.dtype
    z = np.random.default_rng(seed).standard_normal((count, cfg.model.latent_dim)).astype(dt)
    with default_dtype(dt):
        out = infer(model, z, None, tau=_infer_tau(cfg), k=cfg.routing.k,
                    renormalize=cfg.routing.renormalize, mode=cfg.routing.infer_mode)
    return out[:, 0]


def make_partials(grids: list[VoxelGrid], ratio: float, mode: str, seed: int) -> np.ndarray:
    out = []
    for i, g in enumerate(grids):
        xp, _ = apply_occlusion(g, ratio, mode, np.random.default_rng([seed, i]))
        out.append(xp.values)
    return np.stack(out).astype(np.float64)


def evaluate_completion(
    model: MoECGAN,
    cfg: RunConfig,
    grids: list[VoxelGrid],
    ratio: float | None = None,
    mode: str | None = None,
    batch: int = 16,
) -> list[MetricReport]:
    e = cfg.eval
    ratio = e.occlusion_ratio if ratio is None else ratio
    mode = e.occlusion_mode if mode is None else mode
    partials = make_partials(grids, ratio, mode, e.seed)
    outs = np.concatenate(
        [complete_grids(model, cfg, partials[s : s + batch], e.seed + s) for s in range(0, len(partials), batch)]
    )
    return [
        evaluate_pair(g.values, outs[i], partials[i], e.n_points, e.seed + i, e.threshold, e.emd_points)
        for i, g in enumerate(grids)
    ]


def top_experts(model: MoECGAN, cfg: RunConfig, partials: np.ndarray, seed: int) -> list[int]:
    """Highest-probability expert per partial grid under the inference temperature."""
    dt = cfg.dtype
    z = np.random.default_rng([seed, len(partials)]).standard_normal((len(partials), cfg.model.latent_dim)).astype(dt)
    was = model.training
    model.eval()
    try:
        with default_dtype(dt):
            p, _, _ = route_batch(model, z, partials.astype(dt)[:, None], _infer_tau(cfg), 1, 1, False)
    finally:
        model.train(was)
    return [int(i) for i in p.argmax(axis=1)]


def occlusion_sweep(model: MoECGAN, cfg: RunConfig, grids: list[VoxelGrid], ratios, mode: str | None = None) -> list[dict]:
    rows = []
    for r in ratios:
        reps = evaluate_completion(model, cfg, grids, float(r), mode)
        row = summarize(reps)
        row["occlusion_ratio"] = float(r)
        row["label"] = f"{int(round(r * 100))}%"
        rows.append(row)
    return rows


def ablation(
    base: RunConfig,
    experts=(1, 4, 8),
    data: ShapeSet | None = None,
    out_dir: str | Path | None = None,
) -> tuple[list[dict], str]:
    """Train and evaluate one model per expert count; returns rows and a Markdown report."""
    data = data or synthesize_dataset(base.data.n_shapes, base.data.resolution, base.data.seed, tuple(base.data.families))
    test = [data.grids[i] for i in data.test_idx]
    rows = []
    for n in experts:
        cfg = RunConfig.from_dict(base.to_dict())
        cfg.set("model.n_experts", int(n))
        cfg.set("routing.k", min(base.routing.k, int(n)))
        cfg.set("routing.k_min", min(base.routing.k_min, int(n)))
        cfg.validate()
        res = train_run(cfg, data, None if out_dir is None else Path(out_dir) / f"n{n}")
        model = res.trainer.model
        row = summarize(evaluate_completion(model, cfg, test))
        partials = make_partials(test, cfg.eval.occlusion_ratio, cfg.eval.occlusion_mode, cfg.eval.seed)
        fams = [data.families[i] for i in data.test_idx]
        row.update(label=f"n={n}", n_experts=int(n), nonfinite=res.nonfinite,
                   u_avg=[float(u) for u in res.trainer.dcc.u_avg],
                   routing_consistency=routing_consistency(top_experts(model, cfg, partials, cfg.eval.seed), fams))
        rows.append(row)
    title = f"Expert-count ablation, completion at {int(round(base.eval.occlusion_ratio * 100))}% occlusion"
    report = markdown_table(rows, "label", title)
    report += (
        f"\nSettings: resolution {base.data.resolution}, {base.train.epochs} epochs, batch {base.train.batch_size}, "
        f"{len(data.train_idx)} training / {len(test)} held-out procedural shapes.\n"
        "\nRouting consistency (share of held-out shapes sent to their family's most common expert; "
        "uncalibrated diagnostic): "
        + ", ".join(f"{r['label']}: {r['routing_consistency']:.2f}" for r in rows)
        + "\n"
    )
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.md").write_text(report)
        (Path(out_dir) / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    return rows, report


__all__ += ["generate_grids", "make_partials", "top_experts", "NumericAbort"]
