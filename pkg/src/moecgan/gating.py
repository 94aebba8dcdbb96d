"""Context-aware gating: affinity scores, temperature softmax, top-k, capacity routing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .dcc import DccState
from .tensor import ShapeError, Tensor, concat, softmax_temperature

__all__ = [
    "GatingNetwork",
    "GatingState",
    "RoutingDecision",
    "affinity_scores",
    "gate",
    "topk_indices",
    "topk_gate",
    "mixture_output",
    "route_with_capacity",
    "adaptive_k",
    "skewed_preferences",
    "simulate_routing",
]


class GatingNetwork(nn.Module):
    """MLP over ``[z, flatten(x_p), pooled f_1 .. f_n]`` producing one score per expert.

    With ``use_features=False`` the expert-feature block is dropped from the
    input (ablation), which makes the scores independent of ``F``.
    """

    def __init__(
        self,
        latent_dim: int,
        resolution: int,
        feature_dim: int,
        n_experts: int,
        hidden: tuple[int, int] = (64, 32),
        use_features: bool = True,
        rng=None,
    ):
        super().__init__()
        self.latent_dim = latent_dim
        self.voxel_dim = resolution**3
        self.feature_dim = feature_dim
        self.n_experts = n_experts
        self.use_features = use_features
        in_dim = latent_dim + self.voxel_dim + (n_experts * feature_dim if use_features else 0)
        h1, h2 = hidden
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, h1, rng=rng),
            nn.GELU(),
            nn.Linear(h1, h2, rng=rng),
            nn.GELU(),
            nn.Linear(h2, n_experts, rng=rng),
        )

    def forward(self, z: Tensor, x_p, features: Sequence[Tensor]) -> Tensor:
        return affinity_scores(self, z, x_p, features)


def _as_batch(t) -> Tensor:
    t = t if isinstance(t, Tensor) else Tensor(np.asarray(t))
    return t.reshape(1, -1) if t.ndim == 1 else t


def affinity_scores(gn: GatingNetwork, z, x_p, features: Sequence) -> Tensor:
    """Scores ``[B, n]``. ``x_p=None`` (generation) feeds a zero block of the same width."""
    if len(features) != gn.n_experts:
        raise ShapeError(f"expected {gn.n_experts} expert feature tensors, got {len(features)}")
    z = _as_batch(z)
    B = z.shape[0]
    if x_p is None:
        xp = Tensor(np.zeros((B, gn.voxel_dim), dtype=z.dtype))
    else:
        arr = x_p.values if hasattr(x_p, "values") else (x_p.data if isinstance(x_p, Tensor) else x_p)
        xp = Tensor(np.asarray(arr, dtype=z.dtype).reshape(B, gn.voxel_dim))
    parts = [z, xp]
    if gn.use_features:
        parts += [_as_batch(f) for f in features]
    return gn.mlp(concat(parts, axis=1))


@dataclass
class GatingState:
    scores: np.ndarray
    probs: np.ndarray
    gates: np.ndarray
    tau: float
    k: int


def topk_indices(p: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, descending; ties go to the lower index."""
    p = np.asarray(p)
    n = p.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    order = np.argsort(-p, axis=-1, kind="stable")
    return order[..., :k]


def topk_gate(p: np.ndarray, k: int, renormalize: bool = False) -> np.ndarray:
    """Keep the top-k probabilities, zero the rest (optionally rescale to sum 1)."""
    p = np.asarray(p, dtype=np.float64)
    idx = topk_indices(p, k)
    g = np.zeros_like(p)
    np.put_along_axis(g, idx, np.take_along_axis(p, idx, axis=-1), axis=-1)
    if renormalize:
        g = g / g.sum(axis=-1, keepdims=True)
    return g


def gate(scores: np.ndarray, tau: float, k: int, renormalize: bool = False) -> GatingState:
    s = np.asarray(scores, dtype=np.float64)
    p = softmax_temperature(Tensor(s), tau).data
    return GatingState(s, p, topk_gate(p, k, renormalize), tau, k)


def adaptive_k(p: np.ndarray, k_min: int, k_max: int) -> int:
    """``k_min + floor(H(p) / ln n * (k_max - k_min + 1))`` clamped to ``[k_min, k_max]``."""
    p = np.asarray(p, dtype=np.float64)
    n = p.shape[-1]
    if not 1 <= k_min <= k_max <= n:
        raise ValueError(f"need 1 <= k_min <= k_max <= n, got {k_min}, {k_max}, n={n}")
    if n == 1:
        return k_min
    q = p[p > 0]
    h = float(-(q * np.log(q)).sum())
    # small slack so exact fractions like 0.5 * 2 do not floor to 0 after rounding
    step = math.floor(h / math.log(n) * (k_max - k_min + 1) + 1e-9)
    return int(min(max(k_min + step, k_min), k_max))


def mixture_output(g: Sequence[float], H: Sequence) -> object:
    """``sum_i g_i h_i``. Entries of ``H`` may be zero-argument callables; those
    with zero weight are never called."""
    g = np.asarray(g, dtype=np.float64)
    if len(H) != len(g):
        raise ShapeError(f"got {len(g)} gate weights but {len(H)} expert outputs")
    total = None
    shape = None
    wrap = None
    for gi, h in zip(g, H):
        if gi == 0:
            continue
        h = h() if callable(h) else h
        if hasattr(h, "values") and hasattr(h, "resolution"):
            wrap = type(h)
            h = np.asarray(h.values, dtype=np.float64)
        hshape = h.shape
        if shape is None:
            shape = hshape
        elif hshape != shape:
            raise ShapeError(f"expert outputs differ in shape: {shape} vs {hshape}")
        term = h * float(gi)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("all gate weights are zero")
    if wrap is not None:
        return wrap(np.clip(total, 0.0, 1.0))
    return total


@dataclass
class RoutingDecision:
    expert: int
    overflow: bool
    candidates: list[int] = field(default_factory=list)


def route_with_capacity(candidates: Sequence[Sequence[int]], dcc: DccState) -> list[RoutingDecision]:
    """Hard capacity-constrained assignment, samples in batch order.

    Each sample takes its first candidate whose load is still below capacity.
    When every candidate is full the sample goes to the expert with the largest
    relative residual ``(C_i - L_i) / C_i`` (lowest index on ties) and the
    decision is flagged as overflow.
    """
    dcc.reset_loads()
    caps = np.asarray(dcc.capacities, dtype=np.float64)
    loads = dcc.loads
    out = []
    for cand in candidates:
        cand = [int(i) for i in cand]
        if not cand:
            raise ValueError("empty candidate list")
        chosen = None
        for i in cand:
            if loads[i] < caps[i]:
                chosen = i
                break
        overflow = chosen is None
        if overflow:
            residual = (caps - loads) / caps
            chosen = int(np.argmax(residual))
            dcc.overflow += 1
        loads[chosen] += 1
        out.append(RoutingDecision(chosen, overflow, cand))
    return out



def skewed_preferences(rng: np.random.Generator, batch: int, n: int, favourite: float = 0.6) -> np.ndarray:
    """Preference orders ``[batch, n]``: expert 0 ranks first with probability ``favourite``,
    otherwise a uniformly chosen other expert does; the remaining order is random."""
    orders = np.empty((batch, n), dtype=np.int64)
    for b in range(batch):
        if n == 1 or rng.random() < favourite:
            first = 0
        else:
            first = int(rng.integers(1, n))
        rest = [i for i in rng.permutation(n) if i != first]
        orders[b] = [first] + rest
    return orders


def simulate_routing(
    cfg,
    n_batches: int = 500,
    k: int = 2,
    favourite: float = 0.6,
    constrained: bool = True,
    seed: int = 0,
) -> DccState:
    """Drive the DCC scheduler with a synthetic skewed-affinity workload.

    Without the constraint each sample goes to its first preference; the
    utilisation EMA is tracked with the same cadence either way.
    """
    rng = np.random.default_rng(seed)
    state = DccState.initial(cfg)
    for _ in range(n_batches):
        prefs = skewed_preferences(rng, cfg.batch_size, cfg.n_experts, favourite)
        if constrained:
            route_with_capacity(prefs[:, :k], state)
            state.step(cfg, cfg.batch_size)
        else:
            state.reset_loads()
            state.loads = np.bincount(prefs[:, 0], minlength=cfg.n_experts).astype(np.int64)
            state.iteration += 1
            if state.iteration % cfg.update_period == 0:
                state.record_batch(state.loads, cfg.batch_size, cfg.momentum)
    return state
