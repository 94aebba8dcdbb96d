"""Dataset synthesis, the epoch loop, logging and trainer checkpoints."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from .dcc import DccLog, DccState
from .gan import StepReport, Trainer
from .voxel import FAMILIES, VoxelGrid, random_shape_spec, split_indices, synthesize_shape

__all__ = ["ShapeSet", "synthesize_dataset", "fit", "save_trainer", "load_trainer", "LossLog"]


@dataclass
class ShapeSet:
    grids: list[VoxelGrid]
    families: list[str]
    seeds: list[int]
    train_idx: np.ndarray
    test_idx: np.ndarray

    def array(self, idx, dtype=np.float64) -> np.ndarray:
        return np.stack([self.grids[i].values for i in idx]).astype(dtype)[:, None]


def synthesize_dataset(n: int, resolution: int, seed: int, families=FAMILIES) -> ShapeSet:
    """``n`` procedural shapes, families in round-robin, shape ``i`` seeded by ``(seed, i)``."""
    grids, fams, seeds = [], [], []
    for i in range(n):
        fam = families[i % len(families)]
        rng = np.random.default_rng([seed, i])
        spec = random_shape_spec(fam, rng, seed=int(seed * 100003 + i))
        grids.append(synthesize_shape(spec, resolution))
        fams.append(fam)
        seeds.append(spec.seed)
    train, test = split_indices(n, seed)
    return ShapeSet(grids, fams, seeds, train, test)


class LossLog:
    columns = ["iteration", "epoch", "loss_d", "loss_g", "loss_geom", "loss_gn", "overflow", "tau"]

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(self.columns)

    def append(self, epoch: int, rep: StepReport, tau: float) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [rep.iteration, epoch, repr(rep.loss_d), repr(rep.loss_g), repr(rep.loss_geom),
                 repr(rep.loss_gn), rep.overflow, repr(tau)]
            )


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[s : s + batch_size] for s in range(0, n - batch_size + 1, batch_size)]


def fit(
    trainer: Trainer,
    data: np.ndarray,
    epochs: int,
    batch_size: int,
    seed: int = 0,
    dcc_log: DccLog | None = None,
    loss_log: LossLog | None = None,
    on_epoch_end: Callable[[int], None] | None = None,
    max_iterations: int | None = None,
) -> list[StepReport]:
    """Run (or resume) training until ``epochs`` or ``max_iterations`` total iterations.

    The position inside the schedule is derived from the trainer's iteration
    counter, so a restored trainer continues with the exact next batch.
    """
    n = len(data)
    per_epoch = n // batch_size
    if per_epoch == 0:
        raise ValueError(f"dataset of {n} shapes is smaller than one batch of {batch_size}")
    reports = []
    start = trainer.dcc.iteration
    for epoch in range(start // per_epoch, epochs):
        trainer.dcc.set_phase_base(epoch, epochs, trainer.dcc_cfg)
        batches = epoch_batches(n, batch_size, seed, epoch)
        first = start - epoch * per_epoch if epoch == start // per_epoch else 0
        for idx in batches[first:]:
            if max_iterations is not None and trainer.dcc.iteration >= max_iterations:
                return reports
            rep = trainer.train_step(data[idx])
            reports.append(rep)
            if loss_log is not None:
                loss_log.append(epoch, rep, trainer.dcc.tau)
            if rep.dcc_updated and dcc_log is not None:
                dcc_log.append(trainer.dcc, rep.overflow)
        trainer.epoch = epoch + 1
        if on_epoch_end is not None:
            on_epoch_end(epoch)
    return reports


def save_trainer(trainer: Trainer, path: str | Path, config: dict | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in trainer.model.state_dict().items()}
    for prefix, opt in trainer.optimizer_states().items():
        for k, v in opt.state_dict().items():
            tensors[f"{prefix}.{k}"] = v
    manifest = {
        "config_hash": checkpoint.config_hash(config or {}),
        "config": config or {},
        "iteration": trainer.dcc.iteration,
        "epoch": getattr(trainer, "epoch", 0),
        "dcc": trainer.dcc.snapshot(),
        "rng": trainer.rng.bit_generator.state,
        "monitor": trainer.monitor.snapshot(),
        "counters": trainer.counters,
        "overflow_total": trainer.overflow_total,
    }
    checkpoint.save(path, manifest, tensors)


def load_trainer(trainer: Trainer, path: str | Path) -> dict:
    """Restore parameters, buffers, optimiser moments, DCC and RNG state in place; returns the manifest."""
    manifest, tensors = checkpoint.load(path)
    trainer.model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    for prefix, opt in trainer.optimizer_states().items():
        sub = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
        opt.load_state_dict(sub)
    trainer.dcc = DccState.from_snapshot(manifest["dcc"])
    trainer.rng.bit_generator.state = manifest["rng"]
    trainer.monitor.load(manifest["monitor"])
    trainer.counters = dict(manifest["counters"])
    trainer.overflow_total = int(manifest["overflow_total"])
    trainer.epoch = int(manifest["epoch"])
    return manifest


def load_model_state(model, path: str | Path) -> dict:
    manifest, tensors = checkpoint.load(path)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    return manifest


def dump_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
