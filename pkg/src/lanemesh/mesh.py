"""Triangle meshes and the point clouds sampled from their surfaces.

Also holds the synthetic shapes used as fixtures and the corruption used
for repair experiments.

All randomness goes through :func:`make_rng`, a Philox (counter-based) 64-bit
generator, so seeded results are reproducible across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

#: Half a quantization cell; normalized meshes are inset by this margin.
EPS = 1.0 / 1024.0


class MeshError(ValueError):
    """Raised for invalid meshes and rejected mesh operations."""


class ObjParseError(MeshError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True, eq=False)
class Mesh:
    """Vertices (V, 3) float64 and faces (F, 3) int64 indexing into them."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        if not np.isfinite(v).all():
            raise MeshError("non-finite vertex coordinate")
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise MeshError("face index out of range")
            if ((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])).any():
                raise MeshError("face with repeated vertex index")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) corner coordinates."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_normals(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit normals from the winding, plus a mask of non-degenerate faces."""
        t = self.triangles()
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        norm = np.linalg.norm(n, axis=1)
        ok = norm > 1e-300
        out = np.zeros_like(n)
        out[ok] = n[ok] / norm[ok, None]
        return out, ok


# ---------------------------------------------------------------------------
# OBJ I/O


def _obj_index(tok: str, n_vertices: int, lineno: int) -> int:
    head = tok.split("/", 1)[0]
    try:
        idx = int(head)
    except ValueError:
        raise ObjParseError(lineno, f"malformed face index {tok!r}") from None
    if idx < 0:
        idx = n_vertices + idx
    else:
        idx -= 1
    if idx < 0 or idx >= n_vertices:
        raise ObjParseError(lineno, f"index out of range: {tok}")
    return idx


def parse_obj(text: str) -> Mesh:
    vertices: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise ObjParseError(lineno, "vertex record needs 3 coordinates")
            try:
                xyz = tuple(float(p) for p in parts[1:4])
            except ValueError:
                raise ObjParseError(lineno, "malformed vertex coordinate") from None
            if not all(math.isfinite(c) for c in xyz):
                raise ObjParseError(lineno, "non-finite coordinate")
            vertices.append(xyz)
        elif tag == "f":
            if len(parts) < 4:
                raise ObjParseError(lineno, "face record needs at least 3 vertices")
            idx = [_obj_index(p, len(vertices), lineno) for p in parts[1:]]
            if len(set(idx)) != len(idx):
                raise ObjParseError(lineno, "face with repeated vertex index")
            # fan triangulation around the first corner
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
        # vn, vt, o, g, s, usemtl, ... are ignored
    return Mesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                np.array(faces, dtype=np.int64).reshape(-1, 3))


def load_obj(path: str | Path) -> Mesh:
    return parse_obj(Path(path).read_text())


def dumps_obj(mesh: Mesh) -> str:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    return "\n".join(lines) + "\n"


def save_obj(mesh: Mesh, path: str | Path) -> None:
    Path(path).write_text(dumps_obj(mesh))


# ---------------------------------------------------------------------------
# normalization and quantization


def normalize(mesh: Mesh) -> Mesh:
    """Fit the mesh into the centered box of side ``1 - 2*EPS`` inside [0, 1)^3.

    Aspect ratio is preserved; the longest bounding-box side spans the box.
    """
    if mesh.n_vertices == 0:
        raise MeshError("empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    longest = float((hi - lo).max())
    if longest <= 0.0:
        raise MeshError("degenerate extent")
    scale = (1.0 - 2.0 * EPS) / longest
    center = 0.5 * (lo + hi)
    return Mesh((mesh.vertices - center) * scale + 0.5, mesh.faces)


@dataclass(frozen=True)
class QuantizationGrid:
    bins_per_axis: int = 512

    def quantize(self, c):
        """Bin index ``floor(c * bins)`` clamped to ``[0, bins - 1]``."""
        b = np.floor(np.asarray(c, dtype=np.float64) * self.bins_per_axis)
        out = np.clip(b, 0, self.bins_per_axis - 1).astype(np.int64)
        return int(out) if out.ndim == 0 else out

    def dequantize(self, b):
        """Bin center ``(b + 0.5) / bins``."""
        out = (np.asarray(b, dtype=np.float64) + 0.5) / self.bins_per_axis
        return float(out) if out.ndim == 0 else out


DEFAULT_GRID = QuantizationGrid()


def quantize_coord(c: float, grid: QuantizationGrid = DEFAULT_GRID) -> int:
    return grid.quantize(c)


def dequantize_coord(b: int, grid: QuantizationGrid = DEFAULT_GRID) -> float:
    return grid.dequantize(b)


# ---------------------------------------------------------------------------
# sampling


def sample_surface(mesh: Mesh, n: int, seed: int) -> np.ndarray:
    """Area-weighted face choice followed by uniform barycentric sampling."""
    if n < 1:
        raise MeshError("n must be >= 1")
    if mesh.n_faces == 0:
        raise MeshError("mesh has no faces")
    areas = mesh.face_areas()
    total = float(areas.sum())
    if not total > 0.0:
        raise MeshError("all faces are degenerate (zero area)")
    rng = make_rng(seed)
    cum = np.cumsum(areas)
    face_idx = np.searchsorted(cum, rng.random(n) * cum[-1], side="right")
    face_idx = np.minimum(face_idx, len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.triangles()[face_idx]
    w0 = 1.0 - r1
    w1 = r1 * (1.0 - r2)
    w2 = r1 * r2
    return w0[:, None] * tri[:, 0] + w1[:, None] * tri[:, 1] + w2[:, None] * tri[:, 2]


@dataclass(frozen=True, eq=False)
class PointCloudSet:
    """Four independent surface samplings; X1 is the conditioning cloud.

    Sizes satisfy N2 < N3 < N4 < N1.
    """

    X1: np.ndarray
    X2: np.ndarray
    X3: np.ndarray
    X4: np.ndarray
    seed: int = 0

    def __post_init__(self):
        n1, n2, n3, n4 = (len(x) for x in self.arrays())
        if not (n2 < n3 < n4 < n1):
            raise MeshError(f"ordering N2<N3<N4<N1 violated: {(n1, n2, n3, n4)}")
        for x in self.arrays():
            if x.ndim != 2 or x.shape[1] != 3 or not np.isfinite(x).all():
                raise MeshError("point arrays must be finite (N, 3)")

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.X1, self.X2, self.X3, self.X4

    @property
    def counts(self) -> tuple[int, int, int, int]:
        return tuple(len(x) for x in self.arrays())

    def save(self, path: str | Path) -> None:
        np.savez(path, X1=self.X1, X2=self.X2, X3=self.X3, X4=self.X4, seed=self.seed)

    @classmethod
    def load(cls, path: str | Path) -> "PointCloudSet":
        with np.load(path) as z:
            return cls(z["X1"], z["X2"], z["X3"], z["X4"], int(z["seed"]))


def make_pointcloud_set(mesh: Mesh, counts: tuple[int, int, int, int], seed: int) -> PointCloudSet:
    n1, n2, n3, n4 = counts
    if not (n2 < n3 < n4 < n1):
        raise MeshError(f"ordering N2<N3<N4<N1 violated: {tuple(counts)}")
    xs = [sample_surface(mesh, n, seed + k) for k, n in enumerate(counts)]
    return PointCloudSet(*xs, seed=seed)


# ---------------------------------------------------------------------------
# corruption


def corrupt_mesh(mesh: Mesh, fraction: float, seed: int) -> Mesh:
    """Remove ``floor(fraction * F)`` faces chosen uniformly without replacement.

    Vertices are kept (indices stay stable); surviving faces keep their order.
    """
    f = mesh.n_faces
    if f < 2:
        raise MeshError("corruption needs at least 2 faces")
    if not 0.0 < fraction <= 1.0:
        raise MeshError("fraction must lie in (0, 1)")
    k = int(math.floor(fraction * f))
    if k >= f:
        raise MeshError("corruption would remove all faces")
    drop = make_rng(seed).choice(f, size=k, replace=False)
    keep = np.ones(f, dtype=bool)
    keep[drop] = False
    return Mesh(mesh.vertices, mesh.faces[keep])


# ---------------------------------------------------------------------------
# synthetic shapes

#: Inclusive resolution bounds per shape kind.
SHAPE_BOUNDS = {"cube": (1, 32), "uv_sphere": (3, 64), "torus": (3, 64), "grid": (1, 64)}


def shape_face_count(kind: str, resolution: int) -> int:
    """Face count produced by :func:`synth_shape`."""
    r = resolution
    return {
        "cube": 12 * r * r,
        "uv_sphere": 2 * r * r - 2 * r,
        "torus": 2 * r * r,
        "grid": 2 * r * r,
    }[kind]


def _cube(r: int):
    index: dict[tuple[int, int, int], int] = {}
    verts: list[tuple[int, int, int]] = []

    def vid(p):
        if p not in index:
            index[p] = len(verts)
            verts.append(p)
        return index[p]

    faces = []
    # (normal axis, side, u axis, v axis) with u x v pointing outward
    sides = [(0, 1, 1, 2), (0, 0, 2, 1), (1, 1, 2, 0), (1, 0, 0, 2), (2, 1, 0, 1), (2, 0, 1, 0)]
    for axis, side, ua, va in sides:
        for i in range(r):
            for j in range(r):
                quad = []
                for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                    p = [0, 0, 0]
                    p[axis] = side * r
                    p[ua] = i + di
                    p[va] = j + dj
                    quad.append(vid(tuple(p)))
                a, b, c, d = quad
                faces += [(a, b, c), (a, c, d)]
    v = np.array(verts, dtype=np.float64) / r * 2.0 - 1.0
    return v, np.array(faces)


def _uv_sphere(r: int):
    rings, segs = r, r
    verts = [(0.0, 0.0, 1.0)]
    for i in range(1, rings):
        theta = math.pi * i / rings
        for j in range(segs):
            phi = 2.0 * math.pi * j / segs
            verts.append((math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)))
    verts.append((0.0, 0.0, -1.0))
    south = len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * segs + (j % segs)

    faces = []
    for j in range(segs):
        faces.append((0, ring(1, j), ring(1, j + 1)))
    for i in range(1, rings - 1):
        for j in range(segs):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j + 1), ring(i + 1, j)
            faces += [(a, d, c), (a, c, b)]
    for j in range(segs):
        faces.append((south, ring(rings - 1, j + 1), ring(rings - 1, j)))
    return np.array(verts), np.array(faces)


def _torus(r: int, major: float = 1.0, minor: float = 0.4):
    verts = []
    for i in range(r):
        u = 2.0 * math.pi * i / r
        for j in range(r):
            v = 2.0 * math.pi * j / r
            rad = major + minor * math.cos(v)
            verts.append((rad * math.cos(u), rad * math.sin(u), minor * math.sin(v)))

    def vid(i, j):
        return (i % r) * r + (j % r)

    faces = []
    for i in range(r):
        for j in range(r):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            faces += [(a, b, c), (a, c, d)]
    return np.array(verts), np.array(faces)


def _grid(r: int):
    xs = np.linspace(0.0, 1.0, r + 1)
    verts = [(x, y, 0.0) for y in xs for x in xs]

    def vid(i, j):
        return j * (r + 1) + i

    faces = []
    for j in range(r):
        for i in range(r):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            faces += [(a, b, c), (a, c, d)]
    return np.array(verts), np.array(faces)


def synth_shape(kind: str, resolution: int, seed: int = 0, jitter: float = 0.0) -> Mesh:
    """Deterministic synthetic mesh; see :data:`SHAPE_BOUNDS` and :func:`shape_face_count`.

    Every kind except grid is closed and consistently oriented (outward).
    ``jitter`` > 0 adds seeded Gaussian noise scaled by the shape's mean edge
    length; with ``jitter == 0`` the seed is unused.
    """
    if kind not in SHAPE_BOUNDS:
        raise MeshError(f"unknown shape kind {kind!r}")
    lo, hi = SHAPE_BOUNDS[kind]
    if not lo <= resolution <= hi:
        raise MeshError(f"{kind} resolution must be in [{lo}, {hi}], got {resolution}")
    build = {"cube": _cube, "uv_sphere": _uv_sphere, "torus": _torus, "grid": _grid}[kind]
    v, f = build(resolution)
    if jitter > 0.0:
        t = v[f]
        edge = np.linalg.norm(t - np.roll(t, 1, axis=1), axis=2).mean()
        v = v + jitter * edge * make_rng(seed).standard_normal(v.shape)
    return Mesh(v, f)
