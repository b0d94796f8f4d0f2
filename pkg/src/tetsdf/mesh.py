"""Tetrahedral background mesh and analytic template shapes.

The tet mesh is the fixed domain on which the signed distance field lives.
Scalar fields are plain float64 arrays with one entry per mesh vertex; use
:func:`check_field` to validate one against a mesh.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

# local vertex pairs of the 6 tet edges, in the order used by TetMesh.tet_edges
LOCAL_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)], dtype=np.int64)

DUPLICATE_TOL = 1e-9
MIN_TET_VOLUME = 1e-15


class EmptyDomainError(ValueError):
    """No grid cell intersects the inflated template."""


# ---------------------------------------------------------------------------
# template shapes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def sdf(self, points):
        p = np.asarray(points, dtype=np.float64)
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Capsule:
    a: tuple[float, float, float]
    b: tuple[float, float, float]
    radius: float

    def sdf(self, points):
        p = np.asarray(points, dtype=np.float64)
        a = np.asarray(self.a, dtype=np.float64)
        ab = np.asarray(self.b, dtype=np.float64) - a
        denom = float(ab @ ab)
        ap = p - a
        if denom == 0.0:
            t = np.zeros(p.shape[:-1])
        else:
            t = np.clip(ap @ ab / denom, 0.0, 1.0)
        closest = a + t[..., None] * ab
        return np.linalg.norm(p - closest, axis=-1) - self.radius

    def bounds(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        return np.minimum(a, b) - self.radius, np.maximum(a, b) + self.radius


@dataclass(frozen=True)
class CapsuleUnion:
    capsules: tuple[Capsule, ...]

    def sdf(self, points):
        return np.min([c.sdf(points) for c in self.capsules], axis=0)

    def bounds(self):
        los, his = zip(*(c.bounds() for c in self.capsules))
        return np.min(los, axis=0), np.max(his, axis=0)


def shape_from_dict(cfg: dict):
    """Build a template shape from a config mapping (``kind`` plus parameters)."""
    kind = cfg.get("kind")
    if kind == "sphere":
        return Sphere(tuple(cfg.get("center", (0.0, 0.0, 0.0))), float(cfg["radius"]))
    if kind == "capsule":
        return Capsule(tuple(cfg["a"]), tuple(cfg["b"]), float(cfg["radius"]))
    if kind == "capsules":
        return CapsuleUnion(tuple(shape_from_dict({"kind": "capsule", **c}) for c in cfg["capsules"]))
    raise ValueError(f"unknown template kind: {kind!r}")


# ---------------------------------------------------------------------------
# tet mesh
# ---------------------------------------------------------------------------


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _signed_volumes(vertices, tets):
    p = vertices[tets]
    e1, e2, e3 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", e1, np.cross(e2, e3)) / 6.0


@dataclass(frozen=True, eq=False)
class TetMesh:
    """Fixed-topology tetrahedral mesh with a deterministic edge numbering.

    Parameters
    ----------
    vertices : (V, 3) float64
        Tet vertex positions in meters.
    tets : (T, 4) int64
        Vertex indices, oriented so every tet has positive signed volume.
    edges : (E, 2) int64
        Unique edges ``(k1, k2)`` with ``k1 < k2``, sorted lexicographically.
        The row index is the edge ordinal.
    tet_edges : (T, 6) int64
        Edge ordinals of each tet, in :data:`LOCAL_EDGES` order.

    Use :meth:`from_arrays` rather than the constructor; it orients the tets
    and builds the edge tables.
    """

    vertices: np.ndarray
    tets: np.ndarray
    edges: np.ndarray
    tet_edges: np.ndarray

    @classmethod
    def from_arrays(cls, vertices, tets) -> "TetMesh":
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        tets = np.array(tets, dtype=np.int64).reshape(-1, 4)
        if len(tets) == 0:
            raise EmptyDomainError("tet mesh has no tetrahedra")
        if tets.min() < 0 or tets.max() >= len(vertices):
            raise ValueError("tet index out of range")
        if len(cKDTree(vertices).query_pairs(DUPLICATE_TOL)):
            raise ValueError(f"duplicate vertices within {DUPLICATE_TOL} m")
        vol = _signed_volumes(vertices, tets)
        if np.any(np.abs(vol) <= MIN_TET_VOLUME):
            raise ValueError("degenerate tetrahedron (volume <= 1e-15)")
        flip = vol < 0
        tets[flip, 2], tets[flip, 3] = tets[flip, 3].copy(), tets[flip, 2].copy()

        pairs = tets[:, LOCAL_EDGES]  # (T, 6, 2)
        pairs = np.sort(pairs, axis=2).reshape(-1, 2)
        edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
        tet_edges = inverse.reshape(-1, 6)
        return cls(
            _frozen(vertices, np.float64),
            _frozen(tets, np.int64),
            _frozen(edges, np.int64),
            _frozen(tet_edges, np.int64),
        )

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def volumes(self) -> np.ndarray:
        return _frozen(_signed_volumes(self.vertices, self.tets), np.float64)

    @cached_property
    def avg_edge_length(self) -> float:
        return average_edge_length(self)

    @cached_property
    def gradient_operator(self) -> np.ndarray:
        """(T, 3, 4) matrices mapping the 4 vertex values of a tet to the
        gradient of their linear interpolant."""
        p = self.vertices[self.tets]
        e = p[:, 1:] - p[:, :1]  # rows u_i - u_0
        einv = np.linalg.inv(e)
        g = np.empty((self.n_tets, 3, 4))
        g[:, :, 1:] = einv
        g[:, :, 0] = -einv.sum(axis=2)
        return _frozen(g, np.float64)

    def scaled(self, factor: float) -> "TetMesh":
        return TetMesh.from_arrays(self.vertices * factor, self.tets)

    def with_vertices(self, vertices) -> "TetMesh":
        """Same topology and edge table, new positions (no re-orientation)."""
        vertices = np.asarray(vertices, dtype=np.float64).reshape(self.vertices.shape)
        return TetMesh(_frozen(vertices, np.float64), self.tets, self.edges, self.tet_edges)

    def edge_lengths(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.linalg.norm(d, axis=1)

    def boundary_vertices(self) -> np.ndarray:
        """Indices of vertices on the boundary faces of the tet domain."""
        faces = np.concatenate([self.tets[:, [1, 2, 3]], self.tets[:, [0, 2, 3]],
                                self.tets[:, [0, 1, 3]], self.tets[:, [0, 1, 2]]])
        faces = np.sort(faces, axis=1).astype(np.int64)
        n = self.n_vertices
        keys, counts = np.unique((faces[:, 0] * n + faces[:, 1]) * n + faces[:, 2], return_counts=True)
        single = keys[counts == 1]
        return np.unique(np.concatenate([single // (n * n), single // n % n, single % n]))


def average_edge_length(mesh: TetMesh) -> float:
    """Arithmetic mean length over the deduplicated edge list."""
    return float(mesh.edge_lengths().mean())


def check_field(mesh: TetMesh, values) -> np.ndarray:
    """Return ``values`` as a float64 array after checking it fits ``mesh``."""
    phi = np.asarray(values, dtype=np.float64)
    if phi.shape != (mesh.n_vertices,):
        raise ValueError(f"field has shape {phi.shape}, expected ({mesh.n_vertices},)")
    if not np.all(np.isfinite(phi)):
        raise ValueError("field contains non-finite values")
    return phi


# Kuhn subdivision of the unit cube: each permutation of the axes gives one
# monotone path from corner 0 to corner 7. Every cube shares the 0-7 diagonal
# so faces of neighbouring cubes are split identically.
def _kuhn_tets():
    tets = []
    for perm in itertools.permutations(range(3)):
        corner = 0
        path = [0]
        for axis in perm:
            corner |= 1 << axis
            path.append(corner)
        tets.append(path)
    tets = np.array(tets, dtype=np.int64)
    bits = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.float64)
    vol = _signed_volumes(bits, tets)
    flip = vol < 0
    tets[flip, 2], tets[flip, 3] = tets[flip, 3].copy(), tets[flip, 2].copy()
    return tets, bits.astype(np.int64)


KUHN_TETS, CUBE_CORNERS = _kuhn_tets()


def cube_tetmesh(size: float = 1.0) -> TetMesh:
    """A single cube of edge ``size`` split into the 6 Kuhn tets."""
    return TetMesh.from_arrays(CUBE_CORNERS * float(size), KUHN_TETS)


def build_band_tetmesh(shape, cell_size: float, inflation: float) -> TetMesh:
    """Tetrahedralize the grid cells touching the inflated template.

    A cell is kept if ``shape.sdf - inflation`` is negative at any of its
    corners; kept cubes are split into 6 tets with a shared main diagonal.
    """
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    if inflation <= 0:
        raise ValueError("inflation must be positive")
    lo, hi = shape.bounds()
    pad = inflation + cell_size
    lo = np.asarray(lo, dtype=np.float64) - pad
    hi = np.asarray(hi, dtype=np.float64) + pad
    dims = np.maximum(np.ceil((hi - lo) / cell_size).astype(np.int64), 1)
    if np.prod(dims + 1) > 50_000_000:
        raise ValueError("grid too large; increase cell_size")

    axes = [lo[i] + cell_size * np.arange(dims[i] + 1) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    corners = np.stack([gx, gy, gz], axis=-1)
    inside = shape.sdf(corners) - inflation < 0  # (nx+1, ny+1, nz+1)

    nx, ny, nz = dims
    keep = np.zeros((nx, ny, nz), dtype=bool)
    for dx, dy, dz in CUBE_CORNERS:
        keep |= inside[dx:dx + nx, dy:dy + ny, dz:dz + nz]
    cells = np.argwhere(keep)
    if len(cells) == 0:
        raise EmptyDomainError("empty domain: no grid cell has an inflated-inside corner")

    # corner grid index of every (cell, local corner)
    cell_corners = cells[:, None, :] + CUBE_CORNERS[None, :, :]  # (C, 8, 3)
    stride = np.array([(ny + 1) * (nz + 1), nz + 1, 1], dtype=np.int64)
    lin = cell_corners @ stride
    used, local = np.unique(lin, return_inverse=True)
    local = local.reshape(-1, 8)
    ijk = np.stack([used // stride[0], (used // stride[1]) % (ny + 1), used % (nz + 1)], axis=1)
    vertices = lo + cell_size * ijk
    tets = local[:, KUHN_TETS].reshape(-1, 4)
    return TetMesh.from_arrays(vertices, tets)


def sample_exact_sdf(shape, mesh: TetMesh) -> np.ndarray:
    """Analytic signed distance of ``shape`` at every tet vertex."""
    if mesh.n_vertices == 0:
        raise ValueError("empty mesh")
    return np.asarray(shape.sdf(mesh.vertices), dtype=np.float64)


def point_in_tets(mesh: TetMesh, points, tol: float = 1e-12) -> np.ndarray:
    """Index of a tet containing each point (-1 if none). Brute force."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    p = mesh.vertices[mesh.tets]
    einv = np.linalg.inv(np.transpose(p[:, 1:] - p[:, :1], (0, 2, 1)))
    out = np.full(len(points), -1, dtype=np.int64)
    for i, x in enumerate(points):
        lam = np.einsum("tij,tj->ti", einv, x - p[:, 0])
        ok = np.all(lam >= -tol, axis=1) & (lam.sum(axis=1) <= 1 + tol)
        hit = np.flatnonzero(ok)
        if len(hit):
            out[i] = hit[0]
    return out


# ---------------------------------------------------------------------------
# binary IO
# ---------------------------------------------------------------------------
# Little-endian throughout.
#   tet mesh:  b"TETMESH\0" | u32 version | u32 0 | u64 nV | u64 nT | f64[nV*3] | u32[nT*4]
#   field:     b"SCALARF\0" | u32 version | u32 0 | u64 n | f64[n]

_MESH_MAGIC = b"TETMESH\0"
_FIELD_MAGIC = b"SCALARF\0"
_VERSION = 1


def write_tetmesh(path, mesh: TetMesh) -> None:
    with open(path, "wb") as f:
        f.write(_MESH_MAGIC)
        f.write(struct.pack("<IIQQ", _VERSION, 0, mesh.n_vertices, mesh.n_tets))
        f.write(mesh.vertices.astype("<f8").tobytes())
        f.write(mesh.tets.astype("<u4").tobytes())


def read_tetmesh(path) -> TetMesh:
    data = Path(path).read_bytes()
    if data[:8] != _MESH_MAGIC:
        raise ValueError(f"{path}: not a tet mesh file")
    version, _, nv, nt = struct.unpack_from("<IIQQ", data, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 8 + struct.calcsize("<IIQQ")
    verts = np.frombuffer(data, dtype="<f8", count=nv * 3, offset=off).reshape(nv, 3)
    off += nv * 24
    tets = np.frombuffer(data, dtype="<u4", count=nt * 4, offset=off).reshape(nt, 4)
    return TetMesh.from_arrays(verts.astype(np.float64), tets.astype(np.int64))


def write_field(path, values) -> None:
    values = np.asarray(values, dtype="<f8")
    with open(path, "wb") as f:
        f.write(_FIELD_MAGIC)
        f.write(struct.pack("<IIQ", _VERSION, 0, len(values)))
        f.write(values.tobytes())


def read_field(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != _FIELD_MAGIC:
        raise ValueError(f"{path}: not a scalar field file")
    version, _, n = struct.unpack_from("<IIQ", data, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 8 + struct.calcsize("<IIQ")
    return np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64)
