"""Run configuration: nested dataclasses, JSON I/O, ``key.path=value`` overrides and validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .dcc import DccConfig
from .gan import ArchConfig, TrainSettings
from .voxel import FAMILIES, OCCLUSION_MODES

__all__ = ["RunConfig", "ConfigError", "PROFILES", "load_config", "profile"]


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class DataSection:
    n_shapes: int = 200
    resolution: int = 16
    seed: int = 0
    train_fraction: float = 0.8
    families: list = field(default_factory=lambda: list(FAMILIES))
    dir: str = "data"


@dataclass
class ModelSection:
    n_experts: int = 4
    latent_dim: int = 64
    latent_channels: int = 4
    width: float = 0.125
    down_channels: list = field(default_factory=lambda: [64, 128, 256])
    dilated_channels: int = 512
    dilation_rates: list = field(default_factory=lambda: [2, 4, 8])
    disc_channels: list = field(default_factory=lambda: [64, 128, 256])
    skip_mode: str = "concat"
    gating_hidden: list = field(default_factory=lambda: [64, 32])
    use_features: bool = True
    seed: int = 0


@dataclass
class RoutingSection:
    k: int = 2
    k_min: int = 1
    adaptive_k: bool = True
    train_mode: str = "hard"
    infer_mode: str = "soft"
    renormalize: bool = False
    infer_tau: float | None = None


@dataclass
class DccSection:
    capacity_factor: float = 1.2
    momentum: float = 0.95
    alpha: float = 0.1
    update_period: int = 5
    min_capacity: float = 1.0
    eta: float = 0.01
    tau_min: float = 0.1
    tau_max: float = 1.5
    offset_bound: float = 0.2
    task_weights: list | None = None
    phase_fractions: list = field(default_factory=lambda: [0.4, 0.4, 0.2])
    tau_explore: float = 1.0
    tau_final: float = 0.3
    enabled: bool = True


@dataclass
class TrainSection:
    task: str = "completion"
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3  # desk scale; the full profile uses 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lam: float = 100.0  # desk scale; the full profile uses 10
    geom_reduction: str = "balanced"
    geom_mask: str = "occlusion"
    geom_empty_weight: float = 6.0
    d_steps: int = 1
    train_gating: bool = True
    occlusion_ratio: list = field(default_factory=lambda: [0.1, 0.9])
    occlusion_mode: str = "random-cells"
    precision: str = "float32"
    seed: int = 0
    checkpoint_every: int = 5


@dataclass
class EvalSection:
    n_points: int = 1024
    emd_points: int | None = 256
    occlusion_ratio: float = 0.5
    occlusion_mode: str = "random-cells"
    seed: int = 1234
    threshold: float = 0.5


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    routing: RoutingSection = field(default_factory=RoutingSection)
    dcc: DccSection = field(default_factory=DccSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run_dir: str = "runs/default"

    # -- conversion -----------------------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        for key, value in _flatten(d):
            cfg.set(key, value)
        return cfg

    def set(self, key: str, value) -> None:
        *path, leaf = key.split(".")
        obj = self
        for part in path:
            if not is_dataclass(obj) or part not in {f.name for f in fields(obj)}:
                raise ConfigError(key, "unknown section")
            obj = getattr(obj, part)
        if not is_dataclass(obj) or leaf not in {f.name for f in fields(obj)}:
            raise ConfigError(key, "unknown key")
        if is_dataclass(getattr(obj, leaf)):
            raise ConfigError(key, "is a section, set its fields instead")
        setattr(obj, leaf, value)

    def override(self, assignment: str) -> None:
        """Apply ``key.path=value``; the value is parsed as JSON when possible."""
        if "=" not in assignment:
            raise ConfigError(assignment, "override must look like key.path=value")
        key, raw = assignment.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        self.set(key.strip(), value)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    # -- derived objects --------------------------------------------------------------------
    def arch(self) -> ArchConfig:
        m = self.model
        return ArchConfig(
            resolution=self.data.resolution,
            latent_dim=m.latent_dim,
            latent_channels=m.latent_channels,
            width=m.width,
            down_channels=tuple(m.down_channels),
            dilated_channels=m.dilated_channels,
            dilation_rates=tuple(m.dilation_rates),
            disc_channels=tuple(m.disc_channels),
            skip_mode=m.skip_mode,
            conditional=self.train.task == "completion",
        )

    def dcc_config(self) -> DccConfig:
        d = self.dcc
        n = self.model.n_experts
        # disabling DCC leaves capacity at the whole batch so routing is never constrained
        factor = d.capacity_factor if d.enabled else float(n)
        return DccConfig(
            n_experts=n,
            batch_size=self.train.batch_size,
            capacity_factor=factor,
            momentum=d.momentum,
            alpha=d.alpha if d.enabled else 1e-12,
            update_period=d.update_period,
            min_capacity=d.min_capacity if d.enabled else float(self.train.batch_size),
            eta=d.eta,
            tau_min=d.tau_min,
            tau_max=d.tau_max,
            offset_bound=d.offset_bound,
            task_weights=d.task_weights,
            phase_fractions=tuple(d.phase_fractions),
            tau_explore=d.tau_explore,
            tau_final=d.tau_final,
        )

    def train_settings(self) -> TrainSettings:
        t, r = self.train, self.routing
        lo, hi = t.occlusion_ratio
        return TrainSettings(
            task=t.task,
            lr=t.lr,
            betas=(t.beta1, t.beta2),
            lam=t.lam,
            geom_reduction=t.geom_reduction,
            geom_mask=t.geom_mask,
            geom_empty_weight=float(t.geom_empty_weight),
            d_steps=t.d_steps,
            k=r.k,
            k_min=r.k_min,
            adaptive_k=r.adaptive_k,
            renormalize=r.renormalize,
            train_gating=t.train_gating,
            occlusion_ratio=(float(lo), float(hi)),
            occlusion_mode=t.occlusion_mode,
        )

    @property
    def dtype(self):
        return np.float64 if self.train.precision == "float64" else np.float32

    # -- validation -----------------------------------------------------------------------
    def validate(self) -> "RunConfig":
        d, m, r, c, t, e = self.data, self.model, self.routing, self.dcc, self.train, self.eval

        def need(cond: bool, key: str, msg: str):
            if not cond:
                raise ConfigError(key, msg)

        need(isinstance(d.resolution, int) and 8 <= d.resolution <= 64, "data.resolution", f"must be an int in [8, 64], got {d.resolution}")
        need(d.resolution % 2 ** len(m.down_channels) == 0, "data.resolution",
             f"{d.resolution} must be divisible by 2^{len(m.down_channels)} (number of downsampling stages)")
        need(isinstance(d.n_shapes, int) and d.n_shapes >= 2, "data.n_shapes", f"must be >= 2, got {d.n_shapes}")
        need(0.0 < d.train_fraction < 1.0, "data.train_fraction", f"must lie in (0, 1), got {d.train_fraction}")
        need(len(d.families) > 0 and all(f in FAMILIES for f in d.families), "data.families", f"entries must be from {FAMILIES}")
        need(isinstance(m.n_experts, int) and m.n_experts >= 1, "model.n_experts", f"must be >= 1, got {m.n_experts}")
        need(m.latent_dim >= 1, "model.latent_dim", "must be positive")
        need(m.width > 0, "model.width", f"must be positive, got {m.width}")
        need(len(m.down_channels) >= 2, "model.down_channels", "need at least two stages")
        need(m.skip_mode in ("concat", "add"), "model.skip_mode", f"must be 'concat' or 'add', got {m.skip_mode!r}")
        need(len(m.gating_hidden) == 2 and min(m.gating_hidden) >= 1, "model.gating_hidden", "must be two positive widths")
        need(1 <= r.k <= m.n_experts, "routing.k", f"must lie in [1, n_experts={m.n_experts}], got {r.k}")
        need(1 <= r.k_min <= r.k, "routing.k_min", f"must lie in [1, k={r.k}], got {r.k_min}")
        need(r.train_mode == "hard", "routing.train_mode", "training uses capacity-constrained hard routing; only 'hard' is supported")
        need(r.infer_mode in ("soft", "hard"), "routing.infer_mode", f"must be 'soft' or 'hard', got {r.infer_mode!r}")
        need(r.infer_tau is None or r.infer_tau > 0, "routing.infer_tau", "must be positive")
        need(0.0 < c.momentum < 1.0, "dcc.momentum", f"must lie in (0, 1), got {c.momentum}")
        need(c.alpha > 0, "dcc.alpha", f"must be positive, got {c.alpha}")
        need(c.capacity_factor > 0, "dcc.capacity_factor", "must be positive")
        need(isinstance(c.update_period, int) and c.update_period >= 1, "dcc.update_period", "must be a positive int")
        need(c.min_capacity >= 1, "dcc.min_capacity", f"must be >= 1, got {c.min_capacity}")
        need(0 < c.tau_min < c.tau_max, "dcc.tau_min", f"need 0 < tau_min < tau_max, got {c.tau_min}, {c.tau_max}")
        need(len(c.phase_fractions) == 3 and abs(sum(c.phase_fractions) - 1) < 1e-9 and min(c.phase_fractions) >= 0,
             "dcc.phase_fractions", f"must be three nonnegative fractions summing to 1, got {c.phase_fractions}")
        need(c.task_weights is None or len(c.task_weights) == m.n_experts, "dcc.task_weights", "need one weight per expert")
        need(t.task in ("completion", "generation"), "train.task", f"must be 'completion' or 'generation', got {t.task!r}")
        need(isinstance(t.epochs, int) and t.epochs >= 1, "train.epochs", f"must be a positive int, got {t.epochs}")
        need(isinstance(t.batch_size, int) and t.batch_size >= 1, "train.batch_size", f"must be a positive int, got {t.batch_size}")
        need(t.lr > 0, "train.lr", f"must be positive, got {t.lr}")
        need(0 <= t.beta1 < 1 and 0 <= t.beta2 < 1, "train.beta1", "betas must lie in [0, 1)")
        need(t.lam >= 0, "train.lam", f"must be nonnegative, got {t.lam}")
        need(t.geom_reduction in ("sum", "mean", "observed", "balanced"), "train.geom_reduction",
             "must be 'sum', 'mean', 'observed' or 'balanced'")
        need(t.geom_mask in ("occlusion", "partial"), "train.geom_mask", "must be 'occlusion' or 'partial'")
        need(t.geom_empty_weight >= 0, "train.geom_empty_weight", f"must be nonnegative, got {t.geom_empty_weight}")
        need(t.d_steps >= 1, "train.d_steps", "must be >= 1")
        need(len(t.occlusion_ratio) == 2 and 0 < t.occlusion_ratio[0] <= t.occlusion_ratio[1] <= 0.95,
             "train.occlusion_ratio", f"must be [lo, hi] with 0 < lo <= hi <= 0.95, got {t.occlusion_ratio}")
        need(t.occlusion_mode in OCCLUSION_MODES, "train.occlusion_mode", f"must be one of {OCCLUSION_MODES}")
        need(t.precision in ("float32", "float64"), "train.precision", "must be 'float32' or 'float64'")
        need(t.checkpoint_every >= 1, "train.checkpoint_every", "must be >= 1")
        need(e.n_points >= 1, "eval.n_points", "must be positive")
        need(e.emd_points is None or e.emd_points >= 1, "eval.emd_points", "must be positive or null")
        need(0 < e.occlusion_ratio <= 0.95, "eval.occlusion_ratio", f"must lie in (0, 0.95], got {e.occlusion_ratio}")
        need(e.occlusion_mode in OCCLUSION_MODES, "eval.occlusion_mode", f"must be one of {OCCLUSION_MODES}")
        need(0 < e.threshold < 1, "eval.threshold", "must lie in (0, 1)")
        return self


def _flatten(d: dict, prefix: str = ""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and k in {f.name for f in fields(RunConfig)} and prefix == "":
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def profile(name: str) -> RunConfig:
    """``desk`` (default, CPU-sized) or ``full`` (full-scale hyperparameters, not meant to finish on a desk)."""
    cfg = RunConfig()
    if name == "desk":
        return cfg
    if name == "full":
        for key, value in {
            "data.resolution": 32,
            "model.n_experts": 8,
            "model.width": 1.0,
            "model.gating_hidden": [512, 256],
            "routing.k": 2,
            "train.epochs": 500,
            "train.batch_size": 64,
            "train.lr": 2e-4,
            "train.lam": 10.0,
            "train.precision": "float32",
        }.items():
            cfg.set(key, value)
        return cfg
    raise ConfigError("profile", f"unknown profile {name!r}; expected 'desk' or 'full'")


PROFILES = ("desk", "full")


def load_config(path: str | Path | None = None, overrides=(), base: str = "desk") -> RunConfig:
    cfg = profile(base)
    if path is not None:
        data = json.loads(Path(path).read_text())
        for key, value in _flatten(data):
            cfg.set(key, value)
    for o in overrides:
        cfg.override(o)
    return cfg.validate()
