"""Voxel grids, procedural training shapes, occlusion masks and VOX1 files.

Grids are indexed ``values[x, y, z]``. Cell ``(i, j, k)`` covers the world
box ``origin + scale / R * [i, i + 1] x [j, j + 1] x [k, k + 1]``; the
default maps the grid onto the unit cube.

VOX1 layout (little-endian)::

    0..3    magic b"VOX1"
    4..7    u32 resolution R
    8..11   u32 flags, bit0 = 1 for a binary payload, 0 for float32
    12..15  reserved, zero
    16..    R^3 payload values, x fastest (index = x + R*y + R*R*z)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "VoxelGrid",
    "OcclusionMask",
    "ProceduralShapeSpec",
    "PointCloud",
    "ShapeError",
    "VoxFormatError",
    "FAMILIES",
    "OCCLUSION_MODES",
    "synthesize_shape",
    "random_shape_spec",
    "apply_occlusion",
    "apply_mask",
    "voxel_to_pointcloud",
    "surface_cells",
    "read_vox",
    "write_vox",
    "split_indices",
]

BINARY_THRESHOLD = 0.5
FAMILIES = ("box", "ellipsoid", "cylinder", "cross", "L-bracket")
OCCLUSION_MODES = ("random-cells", "half-space", "spherical-blob")


class ShapeError(ValueError):
    pass


class VoxFormatError(ValueError):
    pass


@dataclass
class VoxelGrid:
    values: np.ndarray
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or len(set(v.shape)) != 1:
            raise ShapeError(f"voxel grid must be cubic R^3, got shape {v.shape}")
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ShapeError("occupancy values must lie in [0, 1]")
        self.values = v

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def cell_size(self) -> float:
        return self.scale / self.resolution

    def binarize(self, threshold: float = BINARY_THRESHOLD) -> "VoxelGrid":
        return VoxelGrid((self.values > threshold).astype(np.uint8), self.origin, self.scale)

    def occupied(self, threshold: float = BINARY_THRESHOLD) -> np.ndarray:
        return self.values > threshold

    def count(self, threshold: float = BINARY_THRESHOLD) -> int:
        return int(np.count_nonzero(self.values > threshold))

    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0) | (self.values == 1)))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.origin, dtype=np.float64)
        return lo, lo + self.scale

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, VoxelGrid)
            and self.values.shape == other.values.shape
            and bool(np.array_equal(self.values, other.values))
            and tuple(self.origin) == tuple(other.origin)
            and self.scale == other.scale
        )


@dataclass
class OcclusionMask:
    """Binary keep-mask: 1 = cell observed, 0 = cell removed."""

    values: np.ndarray
    seed: int | None = None

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @classmethod
    def full(cls, resolution: int) -> "OcclusionMask":
        return cls(np.ones((resolution,) * 3, dtype=np.uint8))


@dataclass
class ProceduralShapeSpec:
    """A parametric solid in the normalised frame ``[-1, 1]^3``.

    ``params`` holds ``extents`` (3 half-sizes), ``rotation`` (xyz Euler
    angles, radians) and ``center`` (3-vector). Missing keys fall back to
    an axis-aligned, centred shape with half-extent 0.5.
    """

    family: str
    params: dict = field(default_factory=dict)
    seed: int = 0


@dataclass
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    @property
    def count(self) -> int:
        return len(self.points)

    def __len__(self) -> int:
        return len(self.points)


# -- procedural shapes ------------------------------------------------------------

def _rotation(angles) -> np.ndarray:
    ax, ay, az = angles
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _local_coords(resolution: int, params: dict) -> np.ndarray:
    """Cell centres expressed in the shape's local frame, shape ``[R, R, R, 3]``."""
    c = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    pts = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)
    pts = pts - np.asarray(params.get("center", (0.0, 0.0, 0.0)))
    rot = _rotation(params.get("rotation", (0.0, 0.0, 0.0)))
    return pts @ rot  # row vectors: p_local = R^T p


def _rasterize(family: str, resolution: int, params: dict) -> np.ndarray:
    p = _local_coords(resolution, params)
    ex, ey, ez = np.asarray(params.get("extents", (0.5, 0.5, 0.5)), dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    # tolerance keeps the full-extent box inclusive of the outermost cell centres
    tol = 1e-9
    if family == "box":
        occ = (np.abs(x) <= ex + tol) & (np.abs(y) <= ey + tol) & (np.abs(z) <= ez + tol)
    elif family == "ellipsoid":
        with np.errstate(divide="ignore", invalid="ignore"):
            occ = (x / ex) ** 2 + (y / ey) ** 2 + (z / ez) ** 2 <= 1.0
    elif family == "cylinder":
        with np.errstate(divide="ignore", invalid="ignore"):
            occ = ((x / ex) ** 2 + (y / ey) ** 2 <= 1.0) & (np.abs(z) <= ez + tol)
    elif family == "cross":
        t = float(params.get("thickness", 0.35))
        bars = [
            (np.abs(x) <= ex) & (np.abs(y) <= t * ey) & (np.abs(z) <= t * ez),
            (np.abs(y) <= ey) & (np.abs(x) <= t * ex) & (np.abs(z) <= t * ez),
            (np.abs(z) <= ez) & (np.abs(x) <= t * ex) & (np.abs(y) <= t * ey),
        ]
        occ = bars[0] | bars[1] | bars[2]
    elif family == "L-bracket":
        t = float(params.get("thickness", 0.4))
        inside = (np.abs(x) <= ex) & (np.abs(y) <= ey) & (np.abs(z) <= ez)
        foot = y <= -ey + 2 * t * ey
        wall = x <= -ex + 2 * t * ex
        occ = inside & (foot | wall)
    else:
        raise ShapeError(f"unknown shape family {family!r}; expected one of {FAMILIES}")
    return np.nan_to_num(occ, nan=0).astype(np.uint8)


def random_shape_spec(family: str, rng: np.random.Generator, seed: int = 0) -> ProceduralShapeSpec:
    params = {
        "extents": tuple(float(v) for v in rng.uniform(0.35, 0.85, 3)),
        "rotation": tuple(float(v) for v in rng.uniform(-np.pi / 6, np.pi / 6, 3)),
        "center": tuple(float(v) for v in rng.uniform(-0.1, 0.1, 3)),
    }
    if family in ("cross", "L-bracket"):
        params["thickness"] = float(rng.uniform(0.3, 0.45))
    return ProceduralShapeSpec(family, params, seed)


def synthesize_shape(spec: ProceduralShapeSpec, resolution: int) -> VoxelGrid:
    """Rasterise ``spec`` at cell centres. Degenerate parameters are resampled (8 tries)."""
    if not 8 <= resolution <= 64:
        raise ShapeError(f"resolution must be in [8, 64], got {resolution}")
    if spec.family not in FAMILIES:
        raise ShapeError(f"unknown shape family {spec.family!r}; expected one of {FAMILIES}")
    min_cells = 0.01 * resolution**3
    params = spec.params
    for attempt in range(9):
        occ = _rasterize(spec.family, resolution, params)
        if occ.sum() >= min_cells:
            return VoxelGrid(occ)
        if attempt < 8:
            rng = np.random.default_rng([spec.seed, attempt])
            params = random_shape_spec(spec.family, rng, spec.seed).params
    raise ShapeError(f"could not synthesise a nonempty {spec.family} after 8 resamples (seed {spec.seed})")


# -- occlusion --------------------------------------------------------------------

def apply_occlusion(
    x: VoxelGrid, ratio: float, mode: str = "random-cells", seed: int | np.random.Generator = 0
) -> tuple[VoxelGrid, OcclusionMask]:
    """Remove ``floor(ratio * |occupied|)`` occupied cells; returns ``(x_p, mask)``."""
    if not 0.0 < ratio <= 0.95:
        raise ValueError(f"occlusion ratio must be in (0, 0.95], got {ratio}")
    if mode not in OCCLUSION_MODES:
        raise ValueError(f"unknown occlusion mode {mode!r}; expected one of {OCCLUSION_MODES}")
    occ = x.values > BINARY_THRESHOLD
    idx = np.flatnonzero(occ)
    if idx.size == 0:
        raise ShapeError("cannot occlude an empty grid")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_remove = int(np.floor(ratio * idx.size))
    R = x.resolution
    if mode == "random-cells":
        removed = rng.choice(idx, size=n_remove, replace=False)
    else:
        coords = np.stack(np.unravel_index(idx, occ.shape), axis=1).astype(np.float64)
        if mode == "half-space":
            d = rng.standard_normal(3)
            d /= np.linalg.norm(d)
            key = -(coords @ d)
        else:
            center = coords[rng.integers(idx.size)]
            key = np.linalg.norm(coords - center, axis=1)
        order = np.argsort(key, kind="stable")
        removed = idx[order[:n_remove]]
    keep = np.ones(R**3, dtype=np.uint8)
    keep[removed] = 0
    keep = keep.reshape(occ.shape)
    mask = OcclusionMask(keep, seed=None if isinstance(seed, np.random.Generator) else int(seed))
    x_p = VoxelGrid((occ & keep.astype(bool)).astype(np.uint8), x.origin, x.scale)
    return x_p, mask


def apply_mask(x: VoxelGrid, mask: OcclusionMask) -> VoxelGrid:
    """``x * mask`` elementwise."""
    if mask.values.shape != x.values.shape:
        raise ShapeError(f"mask shape {mask.values.shape} does not match grid {x.values.shape}")
    return VoxelGrid(x.values * mask.values.astype(x.values.dtype), x.origin, x.scale)


# -- point clouds -----------------------------------------------------------------

def surface_cells(occ: np.ndarray) -> np.ndarray:
    """Occupied cells with at least one unoccupied 6-neighbour (outside counts as empty)."""
    padded = np.pad(occ.astype(bool), 1)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for shift in (1, -1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return occ.astype(bool) & ~interior


def voxel_to_pointcloud(
    x: VoxelGrid,
    n_points: int = 1024,
    threshold: float = BINARY_THRESHOLD,
    seed: int | np.random.Generator = 0,
) -> PointCloud:
    occ = x.values > threshold
    if not occ.any():
        raise ShapeError(f"grid has no cells above threshold {threshold}")
    cells = np.argwhere(surface_cells(occ))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pick = rng.integers(0, len(cells), size=n_points)
    jitter = rng.uniform(0.0, 1.0, size=(n_points, 3))
    pts = (cells[pick] + jitter) * x.cell_size + np.asarray(x.origin)
    return PointCloud(pts)


# -- VOX1 files ---------------------------------------------------------------------

_MAGIC = b"VOX1"
_HEADER = struct.Struct("<4sIII")


def write_vox(grid: VoxelGrid, path: str | Path, binary: bool | None = None) -> None:
    if binary is None:
        binary = grid.is_binary()
    R = grid.resolution
    flat = grid.values.ravel(order="F")  # x fastest
    if binary:
        payload = (flat > BINARY_THRESHOLD).astype(np.uint8).tobytes()
    else:
        payload = flat.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, R, 1 if binary else 0, 0))
        fh.write(payload)


def read_vox(path: str | Path) -> VoxelGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise VoxFormatError(f"{path}: truncated header ({len(raw)} bytes, need {_HEADER.size})")
    magic, R, flags, reserved = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise VoxFormatError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
    if R == 0:
        raise VoxFormatError(f"{path}: resolution 0 in header")
    binary = bool(flags & 1)
    width = 1 if binary else 4
    expected = _HEADER.size + width * R**3
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "oversized"
        raise VoxFormatError(
            f"{path}: {kind} payload: file is {len(raw)} bytes, header resolution {R} needs {expected}"
        )
    if binary:
        flat = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size)
        if flat.max(initial=0) > 1:
            raise VoxFormatError(f"{path}: binary payload contains values other than 0/1")
        values = flat.reshape((R, R, R), order="F").copy()
    else:
        flat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
        values = flat.reshape((R, R, R), order="F").astype(np.float32)
    return VoxelGrid(values)


# -- dataset split ---------------------------------------------------------------------

def split_indices(n: int, seed: int, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint, seed-stable train/test index sets (80/20 by default)."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def stack_grids(grids: Sequence[VoxelGrid], dtype=np.float64) -> np.ndarray:
    """Batch grids as ``[B, 1, R, R, R]``."""
    return np.stack([g.values for g in grids]).astype(dtype)[:, None]
