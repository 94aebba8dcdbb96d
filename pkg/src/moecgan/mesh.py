"""Marching-cubes isosurface extraction and Wavefront OBJ I/O.

The 256-case table is built at import time from face rules instead of being
typed in. A cell corner counts as inside when its value is strictly above
``iso``. On every cube face the contour segments are fixed by the corners on
that face alone, with the two inside corners of an ambiguous face (diagonal
pair) kept separate. Because neighbouring cubes see the same face rule, the
resulting surface closes up across cubes. Segments are directed so that the
solid lies on their left when the face is seen from outside; chaining them
gives oriented loops, which are fan-triangulated with outward normals.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .voxel import VoxelGrid

__all__ = [
    "TriangleMesh",
    "marching_cubes",
    "write_obj",
    "read_obj",
    "build_case_table",
    "CASE_TABLE",
    "euler_characteristic",
    "edge_valence",
    "surface_area",
    "enclosed_volume",
]

# corner c sits at (c & 1, (c >> 1) & 1, (c >> 2) & 1)
CORNERS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)
EDGES = [(a, b) for a in range(8) for b in range(a + 1, 8) if bin(a ^ b).count("1") == 1]
EDGE_AXIS = np.array([int(np.log2(a ^ b)) for a, b in EDGES], dtype=np.int64)
EDGE_ORIGIN = np.array([CORNERS[a] for a, _ in EDGES], dtype=np.int64)


def _faces() -> list[tuple[list[int], np.ndarray]]:
    """Six faces as (corners in cyclic order, outward normal)."""
    out = []
    for axis in range(3):
        for side in (0, 1):
            cs = [c for c in range(8) if CORNERS[c, axis] == side]
            centre = CORNERS[cs].mean(axis=0)
            u, v = [a for a in range(3) if a != axis]
            ang = np.arctan2(CORNERS[cs, v] - centre[v], CORNERS[cs, u] - centre[u])
            cyc = [cs[i] for i in np.argsort(ang)]
            n = np.zeros(3)
            n[axis] = 1.0 if side else -1.0
            out.append((cyc, n))
    return out


def _edge_id(a: int, b: int) -> int:
    return EDGES.index((min(a, b), max(a, b)))


def _face_segments(cyc: list[int], normal: np.ndarray, inside: np.ndarray) -> list[tuple[int, int]]:
    mid = [(CORNERS[a] + CORNERS[b]) / 2.0 for a, b in EDGES]
    flags = [bool(inside[c]) for c in cyc]
    k = sum(flags)
    if k in (0, 4):
        return []
    # corners to be cut off: the lone odd corner, or each inside corner of a diagonal pair
    if k == 1:
        cut = [cyc[flags.index(True)]]
    elif k == 3:
        cut = [cyc[flags.index(False)]]
    elif flags[0] == flags[2]:
        cut = [c for c, f in zip(cyc, flags) if f]
    else:
        cut = None
    pairs = []
    if cut is not None:
        for c in cut:
            i = cyc.index(c)
            pairs.append((_edge_id(c, cyc[i - 1]), _edge_id(c, cyc[(i + 1) % 4])))
    else:
        crossing = [_edge_id(cyc[i], cyc[(i + 1) % 4]) for i in range(4) if flags[i] != flags[(i + 1) % 4]]
        pairs.append(tuple(crossing))
    segs = []
    for e1, e2 in pairs:
        a, b = EDGES[e1]
        c_in = CORNERS[a] if inside[a] else CORNERS[b]
        p, q = mid[e1], mid[e2]
        if np.dot(np.cross(normal, q - p), c_in - p) < 0:
            segs.append((e1, e2))
        else:
            segs.append((e2, e1))
    return segs


def build_case_table() -> list[list[tuple[int, int, int]]]:
    """For every 8-bit corner mask, the triangles as triples of local edge ids."""
    faces = _faces()
    table = []
    for case in range(256):
        inside = np.array([(case >> c) & 1 for c in range(8)], dtype=bool)
        nxt: dict[int, int] = {}
        for cyc, n in faces:
            for e1, e2 in _face_segments(cyc, n, inside):
                if e1 in nxt:
                    raise AssertionError(f"case {case}: edge {e1} has two outgoing segments")
                nxt[e1] = e2
        tris = []
        seen = set()
        for start in sorted(nxt):
            if start in seen:
                continue
            loop = [start]
            seen.add(start)
            e = nxt[start]
            while e != start:
                loop.append(e)
                seen.add(e)
                e = nxt[e]
            for i in range(1, len(loop) - 1):
                tris.append((loop[0], loop[i], loop[i + 1]))
        table.append(tris)
    return table


CASE_TABLE = build_case_table()
_MAX_T = max(len(t) for t in CASE_TABLE)
_TABLE = np.full((256, max(_MAX_T, 1), 3), -1, dtype=np.int64)
for _c, _tris in enumerate(CASE_TABLE):
    if _tris:
        _TABLE[_c, : len(_tris)] = _tris


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def is_empty(self) -> bool:
        return self.n_triangles == 0


def _triangle_areas(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def marching_cubes(x, iso: float = 0.5) -> TriangleMesh:
    """Isosurface of a grid sampled at cell centres, in the grid's world coordinates.

    The grid is padded with a layer of zeros first, so solids touching the
    boundary still give closed surfaces.
    """
    grid = x if isinstance(x, VoxelGrid) else VoxelGrid(np.asarray(x))
    vals = np.asarray(grid.values, dtype=np.float64)
    R = vals.shape[0]
    if R < 2 or not vals.min() < iso < vals.max():
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    f = np.pad(vals, 1)
    P = f.shape[0]
    inside = f > iso
    case = np.zeros((P - 1,) * 3, dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        case |= inside[dx : P - 1 + dx, dy : P - 1 + dy, dz : P - 1 + dz].astype(np.int64) << c
    cubes = np.argwhere((case != 0) & (case != 255))
    if len(cubes) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    tri_local = _TABLE[case[cubes[:, 0], cubes[:, 1], cubes[:, 2]]]  # [A, T, 3]
    valid = tri_local[:, :, 0] >= 0
    cube_of = np.broadcast_to(np.arange(len(cubes))[:, None], valid.shape)[valid]
    edges = tri_local[valid]  # [M, 3]
    base = cubes[cube_of][:, None, :] + EDGE_ORIGIN[edges]  # [M, 3, 3] lower corner of each edge
    axis = EDGE_AXIS[edges]
    keys = ((base[..., 0] * P + base[..., 1]) * P + base[..., 2]) * 3 + axis
    flat = keys.ravel()
    uniq, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")  # vertex ids in order of first use
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    tris = rank[inverse].reshape(-1, 3)
    # vertex positions by linear interpolation along each edge
    vkey = uniq[order]
    vaxis = vkey % 3
    cell = vkey // 3
    lo = np.stack([cell // (P * P), (cell // P) % P, cell % P], axis=1)
    hi = lo + np.eye(3, dtype=np.int64)[vaxis]
    va = f[lo[:, 0], lo[:, 1], lo[:, 2]]
    vb = f[hi[:, 0], hi[:, 1], hi[:, 2]]
    t = (iso - va) / (vb - va)
    pos = lo + t[:, None] * (hi - lo)
    # padded index i corresponds to cell i - 1, whose centre is at (i - 0.5) * h
    h = grid.cell_size
    verts = (pos - 0.5) * h + np.asarray(grid.origin, dtype=np.float64)
    keep = _triangle_areas(verts, tris) >= 1e-12
    return TriangleMesh(verts, tris[keep])


# -- mesh diagnostics ---------------------------------------------------------------------

def _edges(mesh: TriangleMesh) -> np.ndarray:
    t = mesh.triangles
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    return np.sort(e, axis=1)


def edge_valence(mesh: TriangleMesh) -> np.ndarray:
    """Number of triangles incident to each distinct undirected edge."""
    _, counts = np.unique(_edges(mesh), axis=0, return_counts=True)
    return counts


def euler_characteristic(mesh: TriangleMesh) -> int:
    used = np.unique(mesh.triangles)
    n_edges = len(np.unique(_edges(mesh), axis=0)) if mesh.n_triangles else 0
    return int(len(used) - n_edges + mesh.n_triangles)


def surface_area(mesh: TriangleMesh) -> float:
    if mesh.is_empty():
        return 0.0
    return float(_triangle_areas(mesh.vertices, mesh.triangles).sum())


def enclosed_volume(mesh: TriangleMesh) -> float:
    """Signed volume via tetrahedra to the origin (positive for outward orientation)."""
    if mesh.is_empty():
        return 0.0
    v = mesh.vertices
    a, b, c = v[mesh.triangles[:, 0]], v[mesh.triangles[:, 1]], v[mesh.triangles[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


# -- OBJ --------------------------------------------------------------------------------

def write_obj(mesh: TriangleMesh, path: str | Path) -> None:
    lines = [f"# moecgan mesh: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles"]
    lines += [f"v {x:.6g} {y:.6g} {z:.6g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_obj(path: str | Path) -> TriangleMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
