"""Dynamic capacity constraint (DCC) scheduling for expert routing.

The scheduler keeps an exponential moving average of per-expert
utilisation and, every ``update_period`` iterations, recomputes each
expert's per-batch capacity from the base capacity::

    C_i = C_b * (1 + alpha * (w_i / n - U_avg[i])),   C_i >= C_min

Over-used experts get less room, under-used ones more. No auxiliary loss
is involved; balancing comes entirely from the hard capacity limit applied
during routing.

The routing temperature follows a three-phase curriculum (explore, anneal,
fine-tune). On top of the phase value an entropy-driven offset
``eta * H(U_avg)`` accumulates, bounded to ``offset_bound`` around the phase
base, and the sum is clipped to ``[tau_min, tau_max]``.

CSV log columns (one row per capacity update)::

    iteration, u_avg_0..u_avg_{n-1}, capacity_0..capacity_{n-1}, tau, overflow
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "DccConfig",
    "DccState",
    "DccLog",
    "StarvationMonitor",
    "utilization_entropy",
    "phase_temperature",
    "capacity_constraint_holds",
]


@dataclass
class DccConfig:
    n_experts: int = 8
    batch_size: int = 64
    capacity_factor: float = 1.2
    momentum: float = 0.95
    alpha: float = 0.1
    update_period: int = 5
    min_capacity: float = 1.0
    eta: float = 0.01
    tau_min: float = 0.1
    tau_max: float = 1.5
    offset_bound: float = 0.2
    task_weights: list[float] | None = None
    phase_fractions: tuple[float, float, float] = (0.4, 0.4, 0.2)
    tau_explore: float = 1.0
    tau_final: float = 0.3

    @property
    def base_capacity(self) -> float:
        return self.batch_size / self.n_experts * self.capacity_factor

    @property
    def weights(self) -> np.ndarray:
        if self.task_weights is None:
            return np.ones(self.n_experts)
        return np.asarray(self.task_weights, dtype=np.float64)

    def validate(self) -> None:
        if self.n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must be in (0, 1), got {self.momentum}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.update_period < 1:
            raise ValueError("update_period must be >= 1")
        if self.min_capacity < 1:
            raise ValueError(f"min_capacity must be >= 1, got {self.min_capacity}")
        if not self.tau_min < self.tau_max or self.tau_min <= 0:
            raise ValueError(f"need 0 < tau_min < tau_max, got {self.tau_min}, {self.tau_max}")
        if abs(sum(self.phase_fractions) - 1.0) > 1e-9 or min(self.phase_fractions) < 0:
            raise ValueError(f"phase fractions must be nonnegative and sum to 1, got {self.phase_fractions}")
        if self.task_weights is not None and len(self.task_weights) != self.n_experts:
            raise ValueError("task_weights must have one entry per expert")


def utilization_entropy(u: np.ndarray) -> float:
    """Shannon entropy (nats) of ``u`` renormalised to sum to one; 0 for an all-zero vector."""
    u = np.asarray(u, dtype=np.float64)
    total = u.sum()
    if total <= 0:
        return 0.0
    q = u[u > 0] / total
    return float(-(q * np.log(q)).sum())


@dataclass
class DccState:
    capacities: np.ndarray
    u_avg: np.ndarray
    loads: np.ndarray
    tau: float
    tau_offset: float = 0.0
    tau_base: float = 1.0
    iteration: int = 0
    phase: int = 0
    overflow: int = 0

    @classmethod
    def initial(cls, cfg: DccConfig) -> "DccState":
        cfg.validate()
        n = cfg.n_experts
        return cls(
            capacities=np.full(n, cfg.base_capacity, dtype=np.float64),
            u_avg=np.zeros(n),
            loads=np.zeros(n, dtype=np.int64),
            tau=cfg.tau_explore,
            tau_base=cfg.tau_explore,
        )

    # -- per batch ---------------------------------------------------------------
    def reset_loads(self) -> None:
        self.loads = np.zeros_like(self.loads)
        self.overflow = 0

    def record_batch(self, loads: Sequence[int], batch_size: int, momentum: float) -> np.ndarray:
        """``U_avg <- mu * U_avg + (1 - mu) * L / B``."""
        loads = np.asarray(loads)
        if batch_size <= 0:
            raise ValueError("batch size must be positive")
        if np.any(loads < 0):
            raise ValueError(f"negative expert loads {loads.tolist()}")
        u_batch = loads / batch_size
        self.u_avg = momentum * self.u_avg + (1.0 - momentum) * u_batch
        return self.u_avg

    def update_capacities(self, cfg: DccConfig) -> np.ndarray:
        n = cfg.n_experts
        caps = cfg.base_capacity * (1.0 + cfg.alpha * (cfg.weights / n - self.u_avg))
        self.capacities = np.maximum(caps, cfg.min_capacity)
        return self.capacities

    def update_temperature(self, cfg: DccConfig) -> float:
        """Add ``eta * H(U_avg)`` to the bounded offset, then clip tau."""
        offset = self.tau_offset + cfg.eta * utilization_entropy(self.u_avg)
        self.tau_offset = float(np.clip(offset, -cfg.offset_bound, cfg.offset_bound))
        self.tau = float(np.clip(self.tau_base + self.tau_offset, cfg.tau_min, cfg.tau_max))
        return self.tau

    def set_phase_base(self, epoch: int, total_epochs: int, cfg: DccConfig) -> float:
        self.phase = phase_index(epoch, total_epochs, cfg)
        self.tau_base = phase_temperature(epoch, total_epochs, cfg)
        self.tau = float(np.clip(self.tau_base + self.tau_offset, cfg.tau_min, cfg.tau_max))
        return self.tau

    def step(self, cfg: DccConfig, batch_size: int) -> bool:
        """Advance the iteration counter; run the cadence-gated updates when due.

        Uses the loads accumulated for the current batch. Returns True when an
        update happened.
        """
        self.iteration += 1
        if self.iteration % cfg.update_period != 0:
            return False
        self.record_batch(self.loads, batch_size, cfg.momentum)
        self.update_capacities(cfg)
        self.update_temperature(cfg)
        return True

    def snapshot(self) -> dict:
        return {
            "capacities": [float(c) for c in self.capacities],
            "u_avg": [float(u) for u in self.u_avg],
            "loads": [int(x) for x in self.loads],
            "tau": self.tau,
            "tau_offset": self.tau_offset,
            "tau_base": self.tau_base,
            "iteration": self.iteration,
            "phase": self.phase,
            "overflow": self.overflow,
        }

    @classmethod
    def from_snapshot(cls, snap: dict) -> "DccState":
        return cls(
            capacities=np.asarray(snap["capacities"], dtype=np.float64),
            u_avg=np.asarray(snap["u_avg"], dtype=np.float64),
            loads=np.asarray(snap["loads"], dtype=np.int64),
            tau=float(snap["tau"]),
            tau_offset=float(snap["tau_offset"]),
            tau_base=float(snap["tau_base"]),
            iteration=int(snap["iteration"]),
            phase=int(snap["phase"]),
            overflow=int(snap["overflow"]),
        )


def phase_index(epoch: int, total_epochs: int, cfg: DccConfig) -> int:
    f1, f2, _ = cfg.phase_fractions
    frac = epoch / total_epochs
    if frac < f1:
        return 0
    if frac < f1 + f2:
        return 1
    return 2


def phase_temperature(epoch: int, total_epochs: int, cfg: DccConfig) -> float:
    """Curriculum temperature: flat, then linear anneal, then flat."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    f1, f2, _ = cfg.phase_fractions
    frac = epoch / total_epochs
    if frac < f1:
        return cfg.tau_explore
    if frac < f1 + f2:
        t = (frac - f1) / f2
        return cfg.tau_explore + t * (cfg.tau_final - cfg.tau_explore)
    return cfg.tau_final


def capacity_constraint_holds(loads, capacities, overflow_per_expert) -> bool:
    """Per-batch check ``L_i <= ceil(C_i) + overflow_i`` (the constraint DCC approximates)."""
    loads = np.asarray(loads)
    limit = np.ceil(np.asarray(capacities) - 1e-12) + np.asarray(overflow_per_expert)
    return bool(np.all(loads <= limit))


class StarvationMonitor:
    """Counts consecutive DCC updates during which an expert's U_avg stays below ``fraction / n``."""

    def __init__(self, n_experts: int, fraction: float = 0.25, patience: int = 50):
        self.threshold = fraction / n_experts
        self.patience = patience
        self.streak = np.zeros(n_experts, dtype=np.int64)
        self.worst = np.zeros(n_experts, dtype=np.int64)

    def update(self, u_avg: np.ndarray) -> None:
        low = np.asarray(u_avg) < self.threshold
        self.streak = np.where(low, self.streak + 1, 0)
        self.worst = np.maximum(self.worst, self.streak)

    @property
    def starved(self) -> bool:
        return bool(np.any(self.worst > self.patience))

    def snapshot(self) -> dict:
        return {"streak": self.streak.tolist(), "worst": self.worst.tolist()}

    def load(self, snap: dict) -> None:
        self.streak = np.asarray(snap["streak"], dtype=np.int64)
        self.worst = np.asarray(snap["worst"], dtype=np.int64)


@dataclass
class DccLog:
    """Append-only CSV writer for capacity updates."""

    path: Path
    n_experts: int

    def __post_init__(self):
        self.path = Path(self.path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(self.header())

    def header(self) -> list[str]:
        n = self.n_experts
        return (
            ["iteration"]
            + [f"u_avg_{i}" for i in range(n)]
            + [f"capacity_{i}" for i in range(n)]
            + ["tau", "overflow"]
        )

    def append(self, state: DccState, overflow: int) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [state.iteration]
                + [repr(float(u)) for u in state.u_avg]
                + [repr(float(c)) for c in state.capacities]
                + [repr(state.tau), overflow]
            )
