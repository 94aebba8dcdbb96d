"""Expert generators, discriminator, losses and the capacity-routed training step."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .dcc import DccConfig, DccState, StarvationMonitor, capacity_constraint_holds
from .gating import GatingNetwork, adaptive_k, route_with_capacity, topk_indices
from .tensor import ShapeError, Tensor, concat, no_grad, softmax_temperature

__all__ = [
    "ArchConfig",
    "ExpertGenerator",
    "Discriminator",
    "MoECGAN",
    "LossReport",
    "NumericAbort",
    "generator_forward",
    "discriminator_loss",
    "generator_loss",
    "adversarial_losses",
    "geometric_consistency_loss",
    "route_batch",
    "infer",
    "soft_mixture",
    "Trainer",
    "TrainSettings",
    "frozen",
    "StepReport",
    "EPS",
]

EPS = 1e-7


class NumericAbort(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class ArchConfig:
    resolution: int = 16
    latent_dim: int = 64
    latent_channels: int = 4
    width: float = 0.125
    down_channels: tuple[int, ...] = (64, 128, 256)
    dilated_channels: int = 512
    dilation_rates: tuple[int, ...] = (2, 4, 8)
    disc_channels: tuple[int, ...] = (64, 128, 256)
    skip_mode: str = "concat"
    conditional: bool = True

    def scaled(self, channels: Sequence[int]) -> list[int]:
        return [max(1, int(round(c * self.width))) for c in channels]

    @property
    def feature_dim(self) -> int:
        # channels at the tap after the second transposed conv
        down = self.scaled(self.down_channels)
        return down[len(down) - 3] if len(down) >= 3 else max(1, down[0] // 2)


def _coord_volume(resolution: int, dtype) -> np.ndarray:
    c = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    grid = np.stack(np.meshgrid(c, c, c, indexing="ij"))
    return grid.astype(dtype)[None]


def _block(conv: nn.Module, channels: int) -> nn.Sequential:
    return nn.Sequential(conv, nn.BatchNorm3d(channels), nn.ReLU())


class ExpertGenerator(nn.Module):
    """Encoder (strided convs) -> dilated residual stack -> decoder (transposed convs, skips).

    The latent code is projected to a few channels and broadcast over the
    grid, together with three fixed coordinate channels and, for completion,
    the partial input as one more channel. ``features`` taps the activation
    after the second transposed convolution.
    """

    def __init__(self, cfg: ArchConfig, expert_id: int = 0, rng=None):
        super().__init__()
        if len(cfg.down_channels) < 2:
            raise ValueError("need at least two downsampling stages")
        if cfg.resolution % (2 ** len(cfg.down_channels)):
            raise ValueError(
                f"resolution {cfg.resolution} not divisible by 2^{len(cfg.down_channels)}"
            )
        self.cfg = cfg
        self.expert_id = expert_id
        self.z_proj = nn.Linear(cfg.latent_dim, cfg.latent_channels, rng=rng)
        in_ch = cfg.latent_channels + 3 + (1 if cfg.conditional else 0)
        self.in_channels = in_ch
        down = cfg.scaled(cfg.down_channels)
        self.n_down = len(down)
        prev = in_ch
        for i, c in enumerate(down):
            self.add_module(f"down{i}", _block(nn.Conv3d(prev, c, 4, 2, 1, rng=rng), c))
            prev = c
        dil = cfg.scaled([cfg.dilated_channels])[0]
        for j, rate in enumerate(cfg.dilation_rates):
            conv = nn.Conv3d(prev, dil, 3, 1, rate, dilation=rate, rng=rng)
            body = _block(conv, dil)
            self.add_module(f"dilated{j}", nn.ResidualBlock(body) if prev == dil else body)
            prev = dil
        targets = down[-2::-1] + [max(1, down[0] // 2)]
        skip_from = list(range(self.n_down - 2, -1, -1)) + [None]
        self.skip_from = skip_from
        for j, c in enumerate(targets):
            self.add_module(f"up{j}", _block(nn.ConvTranspose3d(prev, c, 4, 2, 1, rng=rng), c))
            if skip_from[j] is None:
                prev = c + in_ch
            elif cfg.skip_mode == "concat":
                prev = c + down[skip_from[j]]
            else:
                prev = c
        self.head = nn.Conv3d(prev, 1, 3, 1, 1, rng=rng)
        self.feature_channels = targets[1]
        self._coords = None

    def _input(self, z: Tensor, x_p) -> Tensor:
        cfg = self.cfg
        if z.ndim == 1:
            z = z.reshape(1, -1)
        if z.shape[1] != cfg.latent_dim:
            raise ShapeError(f"latent dimension {z.shape[1]} != configured {cfg.latent_dim}")
        B, R = z.shape[0], cfg.resolution
        zc = self.z_proj(z).reshape(B, cfg.latent_channels, 1, 1, 1)
        zvol = zc * Tensor(np.ones((1, 1, R, R, R), dtype=zc.dtype))
        if self._coords is None or self._coords.dtype != zc.dtype:
            self._coords = _coord_volume(R, zc.dtype)
        parts = [zvol, Tensor(np.broadcast_to(self._coords, (B, 3, R, R, R)).copy())]
        if cfg.conditional:
            if x_p is None:
                xp = np.zeros((B, 1, R, R, R), dtype=zc.dtype)
            else:
                xp = x_p.data if isinstance(x_p, Tensor) else np.asarray(x_p)
                xp = xp.astype(zc.dtype).reshape(B, 1, R, R, R)
            parts.append(Tensor(xp))
        return concat(parts, axis=1)

    def forward(self, z: Tensor, x_p=None, partial: bool = False):
        """Returns ``(h, f)``; with ``partial=True`` only the tap ``f`` is computed."""
        x0 = self._input(z, x_p)
        skips = []
        x = x0
        for i in range(self.n_down):
            x = getattr(self, f"down{i}")(x)
            skips.append(x)
        for j in range(len(self.cfg.dilation_rates)):
            x = getattr(self, f"dilated{j}")(x)
        f = None
        for j, src in enumerate(self.skip_from):
            x = getattr(self, f"up{j}")(x)
            if j == 1:
                f = x
                if partial:
                    return f
            if src is None:
                x = concat([x, x0], axis=1)
            elif self.cfg.skip_mode == "concat":
                x = concat([x, skips[src]], axis=1)
            else:
                x = x + skips[src]
        h = self.head(x).sigmoid()
        return h, f


def generator_forward(g: ExpertGenerator, z: Tensor, x_p=None, partial: bool = False):
    return g(z, x_p, partial=partial)


class Discriminator(nn.Module):
    """Spectral-normalised strided convs with instance norm and LeakyReLU, linear + sigmoid head."""

    def __init__(self, cfg: ArchConfig, rng=None):
        super().__init__()
        chans = cfg.scaled(cfg.disc_channels)
        prev = 1
        for i, c in enumerate(chans):
            self.add_module(f"conv{i}", nn.SpectralNorm(nn.Conv3d(prev, c, 4, 2, 1, rng=rng), rng=rng))
            if i > 0:
                self.add_module(f"norm{i}", nn.InstanceNorm3d(c))
            prev = c
        self.n_layers = len(chans)
        side = cfg.resolution // 2 ** len(chans)
        self.flat_dim = prev * side**3
        self.fc = nn.SpectralNorm(nn.Linear(self.flat_dim, 1, rng=rng), rng=rng)

    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x))
        for i in range(self.n_layers):
            x = getattr(self, f"conv{i}")(x)
            if i > 0:
                x = getattr(self, f"norm{i}")(x)
            x = x.leaky_relu(0.2)
        x = x.reshape(x.shape[0], -1)
        return self.fc(x).reshape(-1).sigmoid()


class MoECGAN(nn.Module):
    def __init__(self, cfg: ArchConfig, n_experts: int, gating_hidden=(64, 32), use_features: bool = True, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.n_experts = n_experts
        for i in range(n_experts):
            self.add_module(f"expert{i}", ExpertGenerator(cfg, i, rng=rng))
        self.discriminator = Discriminator(cfg, rng=rng)
        feat = self.expert(0).feature_channels
        self.gating = GatingNetwork(
            cfg.latent_dim, cfg.resolution, feat, n_experts, tuple(gating_hidden), use_features, rng=rng
        )

    def expert(self, i: int) -> ExpertGenerator:
        return getattr(self, f"expert{i}")

    @property
    def experts(self) -> list[ExpertGenerator]:
        return [self.expert(i) for i in range(self.n_experts)]


# -- losses ---------------------------------------------------------------------------

@dataclass
class LossReport:
    L_adv_D: float
    L_adv_G: float
    L_geom: float = 0.0
    lam: float = 0.0


def _log_clamped(d: Tensor) -> Tensor:
    return d.clip(EPS, 1 - EPS).log()


def discriminator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """Negated ``E[log D(x)] + E[log(1 - D(x~))]`` (minimised by the D step)."""
    return -(_log_clamped(d_real).mean() + _log_clamped(1.0 - d_fake).mean())


def generator_loss(d_fake: Tensor) -> Tensor:
    """Non-saturating generator objective ``-E[log D(x~)]``."""
    return -_log_clamped(d_fake).mean()


def adversarial_losses(D, x_real, x_fake) -> LossReport:
    real = x_real.data if isinstance(x_real, Tensor) else np.asarray(x_real)
    fake = x_fake.data if isinstance(x_fake, Tensor) else np.asarray(x_fake)
    if real.shape != fake.shape:
        raise ShapeError(f"real batch {real.shape} and fake batch {fake.shape} differ")
    with no_grad():
        d_real = D(Tensor(real))
        d_fake = D(Tensor(fake))
        l_adv = -float(discriminator_loss(d_real, d_fake).data)
        l_g = float(generator_loss(d_fake).data)
    report = LossReport(l_adv, l_g)
    if not (np.isfinite(report.L_adv_D) and np.isfinite(report.L_adv_G)):
        raise NumericAbort("non-finite adversarial loss", {"d_real": d_real.data, "d_fake": d_fake.data})
    return report


def geometric_consistency_loss(
    x, x_tilde, mask, lam: float = 10.0, reduction: str = "sum", empty_weight: float = 1.0
) -> Tensor:
    """``lam * ||mask * (x - x~)||^2``; differentiable in ``x_tilde``.

    ``reduction="sum"`` is the plain squared norm (summed over the batch too);
    ``"mean"`` averages the masked squared error over all cells and samples;
    ``"observed"`` divides the sum by the number of observed cells instead;
    ``"balanced"`` averages separately over observed occupied and observed empty
    cells (occupancy of ``x`` at 0.5) and adds the two means, the empty one
    scaled by ``empty_weight``.
    """
    def arr(v):
        if isinstance(v, Tensor):
            return v.data
        return np.asarray(v.values if hasattr(v, "values") else v)

    xt = x_tilde if isinstance(x_tilde, Tensor) else Tensor(arr(x_tilde))
    xv, mv = arr(x), arr(mask)
    if xv.shape != xt.shape or mv.shape != xt.shape:
        raise ShapeError(f"shape mismatch: x {xv.shape}, x_tilde {xt.shape}, mask {mv.shape}")
    m = mv.astype(xt.dtype)
    diff = (Tensor(xv.astype(xt.dtype)) - xt) * m
    sq = diff.square()
    if reduction == "sum":
        total = sq.sum()
    elif reduction == "mean":
        total = sq.mean()
    elif reduction == "observed":
        total = sq.sum() / max(1.0, float(m.sum()))
    elif reduction == "balanced":
        occ = (xv > 0.5).astype(xt.dtype)
        w = occ / max(1.0, float((m * occ).sum())) + empty_weight * (1 - occ) / max(1.0, float((m * (1 - occ)).sum()))
        total = (sq * Tensor(w)).sum()
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return total * lam


# -- routing helpers ------------------------------------------------------------------

def route_batch(model: MoECGAN, z: np.ndarray, x_p, tau: float, k: int, k_min: int, adaptive: bool):
    """Partial-forward every expert, score, and return ``(probs, candidate lists, features)``."""
    feats = []
    with no_grad():
        for e in model.experts:
            was = e.training
            e.eval()
            f = e(Tensor(z), x_p, partial=True)
            e.train(was)
            feats.append(nn.global_avg_pool(f))
        scores = model.gating(Tensor(z), x_p, feats)
        p = softmax_temperature(scores, tau).data
    ks = [adaptive_k(row, k_min, k) if adaptive else k for row in p]
    candidates = [list(topk_indices(row, kb)) for row, kb in zip(p, ks)]
    return p, candidates, feats


def soft_mixture(model: MoECGAN, z: np.ndarray, x_p, gates: np.ndarray, counter: dict | None = None) -> np.ndarray:
    """Inference-time ``sum_i g_i h_i`` evaluating each expert only on samples where ``g_i != 0``."""
    B = z.shape[0]
    R = model.cfg.resolution
    out = np.zeros((B, 1, R, R, R), dtype=z.dtype)
    with no_grad():
        for i, e in enumerate(model.experts):
            idx = np.flatnonzero(gates[:, i])
            if idx.size == 0:
                continue
            xp = None if x_p is None else np.asarray(x_p)[idx]
            h, _ = e(Tensor(z[idx]), xp)
            out[idx] += gates[idx, i].reshape(-1, 1, 1, 1, 1) * h.data
            if counter is not None:
                counter["soft_forwards"] = counter.get("soft_forwards", 0) + idx.size
    return np.clip(out, 0.0, 1.0)


@contextlib.contextmanager
def frozen(*modules: nn.Module):
    saved = [(p, p.requires_grad) for m in modules for p in m.parameters()]
    for p, _ in saved:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad = flag


# -- training ---------------------------------------------------------------------------

@dataclass
class TrainSettings:
    task: str = "completion"
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    lam: float = 10.0
    geom_reduction: str = "observed"
    geom_mask: str = "occlusion"
    geom_empty_weight: float = 1.0
    d_steps: int = 1
    k: int = 2
    k_min: int = 1
    adaptive_k: bool = True
    renormalize: bool = False
    train_gating: bool = True
    occlusion_ratio: tuple[float, float] = (0.7, 0.7)
    occlusion_mode: str = "random-cells"


@dataclass
class StepReport:
    iteration: int
    loss_d: float
    loss_g: float
    loss_geom: float
    loss_gn: float
    assignments: list[int]
    overflow: int
    loads: list[int]
    dcc_updated: bool
    hard_forwards: list[int]
    soft_forwards: list[int]
    selected: list[int] = field(default_factory=list)

    def losses(self) -> tuple[float, float, float, float]:
        return (self.loss_d, self.loss_g, self.loss_geom, self.loss_gn)


class Trainer:
    """Owns the model, optimisers, DCC state and RNG; runs one training iteration per call."""

    def __init__(self, model: MoECGAN, dcc_cfg: DccConfig, settings: TrainSettings, seed: int = 0):
        self.model = model
        self.dcc_cfg = dcc_cfg
        self.settings = settings
        self.dcc = DccState.initial(dcc_cfg)
        self.monitor = StarvationMonitor(model.n_experts)
        self.rng = np.random.default_rng(seed)
        lr, betas = settings.lr, settings.betas
        self.opt_experts = [nn.Adam(e.parameters(), lr, betas) for e in model.experts]
        self.opt_d = nn.Adam(model.discriminator.parameters(), lr, betas)
        self.opt_gn = nn.Adam(model.gating.parameters(), lr, betas)
        self.counters = {"samples": 0, "hard_forwards": 0, "soft_forwards": 0, "partial_forwards": 0}
        self.overflow_total = 0
        self.epoch = 0

    # -- data ------------------------------------------------------------------------
    def make_partial(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Occlude each sample of ``x`` ``[B,1,R,R,R]``; returns ``(x_p, observed)``.

        ``observed`` is the occlusion mask (every kept cell, empty ones included)
        when ``geom_mask == "occlusion"``, or the occupancy of ``x_p`` when it is
        ``"partial"``.
        """
        from .voxel import VoxelGrid, apply_occlusion

        lo, hi = self.settings.occlusion_ratio
        xp = np.zeros_like(x)
        keep = np.zeros_like(x)
        for b in range(x.shape[0]):
            ratio = lo if hi <= lo else float(self.rng.uniform(lo, hi))
            grid = VoxelGrid(x[b, 0])
            part, mask = apply_occlusion(grid, ratio, self.settings.occlusion_mode, self.rng)
            xp[b, 0] = part.values
            keep[b, 0] = mask.values
        if self.settings.geom_mask == "partial":
            return xp, (xp > 0.5).astype(x.dtype)
        return xp, keep

    # -- one iteration -------------------------------------------------------------------
    def train_step(self, x: np.ndarray) -> StepReport:
        s = self.settings
        model, D, gn = self.model, self.model.discriminator, self.model.gating
        B = x.shape[0]
        n = model.n_experts
        dtype = x.dtype
        z = self.rng.standard_normal((B, model.cfg.latent_dim)).astype(dtype)
        completion = s.task == "completion"
        if completion:
            x_p, observed = self.make_partial(x)
        else:
            x_p, observed = None, None

        # 1) expert features and routing scores (GN treated as constant here)
        p, candidates, feats = route_batch(model, z, x_p, self.dcc.tau, s.k, s.k_min, s.adaptive_k)
        self.counters["partial_forwards"] += B * n
        decisions = route_with_capacity(candidates, self.dcc)
        assign = np.array([d.expert for d in decisions])
        overflow_per_expert = np.bincount(
            [d.expert for d in decisions if d.overflow], minlength=n
        )
        if not capacity_constraint_holds(self.dcc.loads, self.dcc.capacities, overflow_per_expert):
            raise AssertionError("capacity constraint violated outside overflow fallback")

        # 2) full forward of the selected experts only
        hard_fwd = np.zeros(B, dtype=np.int64)
        pieces, order = [], []
        selected = []
        for i in range(n):
            idx = np.flatnonzero(assign == i)
            if idx.size == 0:
                continue
            selected.append(i)
            xp_i = None if x_p is None else x_p[idx]
            h, _ = model.expert(i)(Tensor(z[idx]), xp_i)
            pieces.append(h)
            order.append(idx)
            hard_fwd[idx] += 1
        perm = np.concatenate(order)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(B)
        x_fake = concat(pieces, axis=0)[inv]
        self.counters["hard_forwards"] += int(hard_fwd.sum())
        self.counters["samples"] += B

        # 3) discriminator update on the detached fake batch
        x_real = Tensor(x)
        fake_const = Tensor(x_fake.data)
        for _ in range(s.d_steps):
            loss_d = discriminator_loss(D(x_real), D(fake_const))
            self._check("loss_d", loss_d)
            loss_d.backward()
            self.opt_d.step()

        # 4) generator update; GN and D are constants, only selected experts move
        with frozen(D, gn):
            loss_g = generator_loss(D(x_fake))
            loss_geom = Tensor(np.zeros((), dtype=dtype))
            if completion:
                loss_geom = geometric_consistency_loss(x, x_fake, observed, s.lam, s.geom_reduction, s.geom_empty_weight)
            total_g = loss_g + loss_geom
            self._check("loss_g", total_g)
            total_g.backward()
        for i in selected:
            self.opt_experts[i].step()

        # 5) gating update through the soft mixture, experts and D frozen
        loss_gn_val = 0.0
        soft_fwd = np.zeros(B, dtype=np.int64)
        if s.train_gating and n > 1:
            loss_gn_val, soft_fwd = self._gating_step(z, x, x_p, observed, feats, assign, x_fake.data)

        # 6) cadence-gated DCC updates
        updated = self.dcc.step(self.dcc_cfg, B)
        if updated:
            self.monitor.update(self.dcc.u_avg)
        self.overflow_total += self.dcc.overflow
        return StepReport(
            iteration=self.dcc.iteration,
            loss_d=float(loss_d.data),
            loss_g=float(loss_g.data),
            loss_geom=float(loss_geom.data),
            loss_gn=loss_gn_val,
            assignments=assign.tolist(),
            overflow=int(self.dcc.overflow),
            loads=self.dcc.loads.tolist(),
            dcc_updated=updated,
            hard_forwards=hard_fwd.tolist(),
            soft_forwards=soft_fwd.tolist(),
            selected=selected,
        )

    def _gating_step(self, z, x, x_p, observed, feats, assign, hard_out):
        s = self.settings
        model, D, gn = self.model, self.model.discriminator, self.model.gating
        B, n = z.shape[0], model.n_experts
        with frozen(D, *model.experts):
            scores = gn(Tensor(z), x_p, feats)
            p = softmax_temperature(scores, self.dcc.tau)
            mask = np.zeros((B, n), dtype=z.dtype)
            for b in range(B):
                kb = adaptive_k(p.data[b], s.k_min, s.k) if s.adaptive_k else s.k
                mask[b, topk_indices(p.data[b], kb)] = 1.0
            g = p * mask
            if s.renormalize:
                g = g / g.sum(axis=1, keepdims=True)
            R = model.cfg.resolution
            H = np.zeros((n, B, 1, R, R, R), dtype=z.dtype)
            soft_fwd = mask.sum(axis=1).astype(np.int64)
            with no_grad():
                for i in range(n):
                    idx = np.flatnonzero(mask[:, i])
                    reuse = idx[assign[idx] == i]
                    H[i, reuse] = hard_out[reuse]
                    fresh = idx[assign[idx] != i]
                    if fresh.size:
                        xp_i = None if x_p is None else x_p[fresh]
                        h, _ = model.expert(i)(Tensor(z[fresh]), xp_i)
                        H[i, fresh] = h.data
            self.counters["soft_forwards"] += int(soft_fwd.sum())
            mix = None
            for i in range(n):
                term = g[:, i].reshape(B, 1, 1, 1, 1) * H[i]
                mix = term if mix is None else mix + term
            loss = generator_loss(D(mix))
            if observed is not None:
                loss = loss + geometric_consistency_loss(x, mix, observed, s.lam, s.geom_reduction, s.geom_empty_weight)
            self._check("loss_gn", loss)
            loss.backward()
        self.opt_gn.step()
        return float(loss.data), soft_fwd

    def _check(self, name: str, loss: Tensor) -> None:
        if not np.all(np.isfinite(loss.data)):
            raise NumericAbort(
                f"non-finite {name} at iteration {self.dcc.iteration + 1}",
                {"dcc": self.dcc.snapshot(), "loss": name},
            )

    # -- state ---------------------------------------------------------------------------
    def optimizer_states(self) -> dict[str, nn.Adam]:
        opts = {f"opt.expert{i}": o for i, o in enumerate(self.opt_experts)}
        opts["opt.discriminator"] = self.opt_d
        opts["opt.gating"] = self.opt_gn
        return opts


# -- inference ----------------------------------------------------------------------------

def infer(
    model: MoECGAN,
    z: np.ndarray,
    x_p=None,
    tau: float = 0.3,
    k: int = 2,
    renormalize: bool = False,
    mode: str = "soft",
    counter: dict | None = None,
) -> np.ndarray:
    """Generate (``x_p=None``) or complete a batch; returns ``[B,1,R,R,R]`` in ``[0,1]``.

    ``mode="soft"`` mixes the top-k experts with their gate weights;
    ``mode="hard"`` sends each sample to its single best expert.
    """
    was = model.training
    model.eval()
    try:
        p, _, _ = route_batch(model, z, x_p, tau, k, k, adaptive=False)
        if mode == "hard":
            gates = np.zeros_like(p)
            gates[np.arange(len(p)), topk_indices(p, 1)[:, 0]] = 1.0
        elif mode == "soft":
            from .gating import topk_gate

            gates = topk_gate(p, k, renormalize).astype(z.dtype)
        else:
            raise ValueError(f"unknown routing mode {mode!r}")
        return soft_mixture(model, z, x_p, gates, counter)
    finally:
        model.train(was)
