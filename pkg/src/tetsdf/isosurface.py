"""Deterministic Marching Tetrahedra and its Jacobian with respect to phi."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import LOCAL_EDGES, TetMesh, check_field

EPS_CLAMP = 1e-8
EPS_GRAD = 1e-4


class GradientClampError(ValueError):
    """An edge phi gap is too small for a well-conditioned Jacobian."""


def clamp_small_phi(phi, eps: float = EPS_CLAMP) -> np.ndarray:
    """Push values with ``|phi| < eps`` out to ``eps * sign(phi)``, with sign(0) = +1."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    phi = np.array(phi, dtype=np.float64)
    small = np.abs(phi) < eps
    phi[small] = np.where(phi[small] < 0, -eps, eps)
    return phi


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangle mesh produced by :func:`marching_tetrahedra`.

    ``edge_ids``, ``endpoints`` and ``weights`` record for every vertex the
    parent tet edge ordinal, its ``(k1, k2)`` tet vertices and the
    interpolation weight of ``k2`` (the weight of ``k1`` is ``1 - weight``).
    They are ``None`` for meshes that did not come from a tet mesh.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    edge_ids: np.ndarray | None = None
    endpoints: np.ndarray | None = None
    weights: np.ndarray | None = None
    source_tet: np.ndarray | None = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def has_provenance(self) -> bool:
        return self.endpoints is not None

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(np.asarray(vertices, dtype=np.float64), self.triangles, self.edge_ids,
                       self.endpoints, self.weights, self.source_tet)

    def subset(self, keep) -> "TriMesh":
        """Keep only the triangles selected by boolean mask ``keep``."""
        keep = np.asarray(keep, dtype=bool)
        st = None if self.source_tet is None else self.source_tet[keep]
        return TriMesh(self.vertices, self.triangles[keep], self.edge_ids, self.endpoints,
                       self.weights, st)

    def undirected_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges and the number of triangles using each."""
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2).astype(np.int64), axis=1)
        keys, counts = np.unique(e[:, 0] * self.n_vertices + e[:, 1], return_counts=True)
        return np.stack([keys // self.n_vertices, keys % self.n_vertices], axis=1), counts

    def is_watertight(self) -> bool:
        if self.n_triangles == 0:
            return False
        _, counts = self.undirected_edges()
        if np.any(counts != 2):
            return False
        # consistent orientation: each directed edge appears exactly once
        d = self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2).astype(np.int64)
        keys = d[:, 0] * self.n_vertices + d[:, 1]
        return bool(len(np.unique(keys)) == len(keys))

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        edges, _ = self.undirected_edges()
        return int(len(used) - len(edges) + self.n_triangles)

    def face_normals(self) -> np.ndarray:
        """Unnormalized ``(v2 - v1) x (v3 - v1)`` per triangle."""
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])


def _crossing_positions(u1, u2, p1, p2):
    d = p1 - p2
    return (-p2 / d)[:, None] * u1 + (p1 / d)[:, None] * u2


def marching_tetrahedra(mesh: TetMesh, phi, eps: float = EPS_CLAMP,
                        positions=None) -> TriMesh:
    """Extract the zero level set of ``phi`` as a watertight triangle mesh.

    ``phi`` must already be clamped (see :func:`clamp_small_phi`).
    ``positions`` optionally replaces the tet vertex positions, e.g. with
    skinned ones; topology and edge numbering stay those of ``mesh``.

    One vertex is created per sign-change edge, numbered in edge-ordinal
    order. Tets with a lone vertex of one sign give one triangle; 2-2 tets
    give a quad split along the diagonal joining the vertices on the lowest
    and highest numbered edges. Faces are wound so normals point toward
    increasing phi.
    """
    phi = check_field(mesh, phi)
    u = mesh.vertices if positions is None else np.asarray(positions, dtype=np.float64)
    if u.shape != mesh.vertices.shape:
        raise ValueError("positions do not match mesh vertex count")

    pos = phi > 0
    k1, k2 = mesh.edges[:, 0], mesh.edges[:, 1]
    cross = pos[k1] != pos[k2]
    gap = np.abs(phi[k1[cross]] - phi[k2[cross]])
    if np.any(gap < 2 * eps):
        raise ValueError("field is not clamped: sign-change edge with |phi1 - phi2| < 2*eps")

    cross_ids = np.flatnonzero(cross)
    vid = np.full(mesh.n_edges, -1, dtype=np.int64)
    vid[cross_ids] = np.arange(len(cross_ids))
    ek1, ek2 = k1[cross_ids], k2[cross_ids]
    p1, p2 = phi[ek1], phi[ek2]
    verts = _crossing_positions(u[ek1], u[ek2], p1, p2)
    weights = p1 / (p1 - p2)

    tpos = pos[mesh.tets]  # (T, 4)
    npos = tpos.sum(axis=1)
    active = np.flatnonzero((npos > 0) & (npos < 4))
    tris = []
    src = []

    # single-triangle tets: the lone vertex is the one in the minority
    single = active[(npos[active] == 1) | (npos[active] == 3)]
    if len(single):
        sp = tpos[single]
        lone_is_pos = npos[single] == 1
        lone = np.argmax(sp == lone_is_pos[:, None], axis=1)
        # local edges touching the lone vertex
        touch = np.any(LOCAL_EDGES[None, :, :] == lone[:, None, None], axis=2)  # (S, 6)
        local = np.nonzero(touch)[1].reshape(-1, 3)
        eids = np.take_along_axis(mesh.tet_edges[single], local, axis=1)
        tris.append(vid[eids])
        src.append(single)

    quad = active[npos[active] == 2]
    if len(quad):
        qp = tpos[quad]
        e = mesh.tet_edges[quad]  # (Q, 6)
        crossing_local = qp[:, LOCAL_EDGES[:, 0]] != qp[:, LOCAL_EDGES[:, 1]]
        local = np.nonzero(crossing_local)[1].reshape(-1, 4)
        eids = np.sort(np.take_along_axis(e, local, axis=1), axis=1)  # ascending ordinal
        lo, m1, m2, hi = eids.T
        tris.append(vid[np.stack([lo, m1, hi], axis=1)])
        tris.append(vid[np.stack([lo, hi, m2], axis=1)])
        src.append(quad)
        src.append(quad)

    if not tris:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
                       np.zeros(0, dtype=np.int64), np.zeros((0, 2), dtype=np.int64),
                       np.zeros(0), np.zeros(0, dtype=np.int64))

    tris = np.concatenate(tris)
    src = np.concatenate(src)
    order = np.lexsort((np.arange(len(src)), src))  # by tet, stable within tet
    tris, src = tris[order], src[order]

    # orient: face normal along the linear phi gradient of the source tet
    tv = u[mesh.tets[src]]
    e1, e2, e3 = tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0], tv[:, 3] - tv[:, 0]
    tphi = phi[mesh.tets[src]]
    dphi = tphi[:, 1:] - tphi[:, :1]
    det = np.einsum("ij,ij->i", e1, np.cross(e2, e3))
    grad = (dphi[:, 0:1] * np.cross(e2, e3) + dphi[:, 1:2] * np.cross(e3, e1)
            + dphi[:, 2:3] * np.cross(e1, e2)) * np.sign(det)[:, None]
    tp = verts[tris]
    n = np.cross(tp[:, 1] - tp[:, 0], tp[:, 2] - tp[:, 0])
    flip = np.einsum("ij,ij->i", n, grad) < 0
    tris[flip, 1], tris[flip, 2] = tris[flip, 2].copy(), tris[flip, 1].copy()

    return TriMesh(verts, tris, cross_ids, np.stack([ek1, ek2], axis=1), weights, src)


@dataclass(frozen=True, eq=False)
class SparseJacobian:
    """Derivatives of 3D vertex positions with respect to tet-vertex values.

    Row ``r`` says ``d vertices[rows[r]] / d phi[cols[r]] = values[r]``.
    """

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    n_rows: int
    n_cols: int

    def vjp(self, grad_vertices) -> np.ndarray:
        """Pull a per-vertex gradient (N, 3) back to a per-phi gradient."""
        g = np.asarray(grad_vertices, dtype=np.float64)
        contrib = np.einsum("ij,ij->i", g[self.rows], self.values)
        return np.bincount(self.cols, weights=contrib, minlength=self.n_cols)

    def jvp(self, dphi) -> np.ndarray:
        """Push a phi perturbation forward to vertex displacements (N, 3)."""
        d = np.asarray(dphi, dtype=np.float64)[self.cols][:, None] * self.values
        out = np.zeros((self.n_rows, 3))
        for c in range(3):
            out[:, c] = np.bincount(self.rows, weights=d[:, c], minlength=self.n_rows)
        return out

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_rows, 3, self.n_cols))
        np.add.at(out, (self.rows, slice(None), self.cols), self.values)
        return out


def edge_lambda_derivatives(p1, p2):
    """d(lambda1, lambda2)/d(phi1, phi2) for the zero-crossing weights.

    Returns ``(dl1_dp1, dl1_dp2, dl2_dp1, dl2_dp2)``.
    """
    d2 = (p1 - p2) ** 2
    return p2 / d2, -p1 / d2, -p2 / d2, p1 / d2


def check_gradient_clamp(p1, p2, eps_grad: float) -> None:
    if np.any(np.abs(p1 - p2) < 2 * eps_grad):
        raise GradientClampError(
            f"gradient clamp violated: sign-change edge with |phi1 - phi2| < {2 * eps_grad:g}")


def mt_vertex_jacobian(mesh: TetMesh, phi, tri: TriMesh, eps_grad: float = EPS_GRAD,
                       positions=None) -> SparseJacobian:
    """Sparse ``d v_i / d phi`` for every extracted vertex.

    ``d v/d phi_k1 = phi_k2 (u_k1 - u_k2) / (phi_k1 - phi_k2)^2`` and
    ``d v/d phi_k2 = phi_k1 (u_k2 - u_k1) / (phi_k1 - phi_k2)^2``.
    """
    if not tri.has_provenance:
        raise ValueError("triangle mesh has no tet-edge provenance")
    phi = check_field(mesh, phi)
    u = mesh.vertices if positions is None else np.asarray(positions, dtype=np.float64)
    k1, k2 = tri.endpoints[:, 0], tri.endpoints[:, 1]
    p1, p2 = phi[k1], phi[k2]
    check_gradient_clamp(p1, p2, eps_grad)
    d2 = ((p1 - p2) ** 2)[:, None]
    diff = u[k1] - u[k2]
    j1 = p2[:, None] * diff / d2
    j2 = -p1[:, None] * diff / d2
    n = tri.n_vertices
    rows = np.repeat(np.arange(n), 2)
    cols = np.stack([k1, k2], axis=1).ravel()
    values = np.stack([j1, j2], axis=1).reshape(-1, 3)
    return SparseJacobian(rows, cols, values, n, mesh.n_vertices)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def write_obj(path, tri: TriMesh) -> None:
    with open(path, "w") as f:
        for v in tri.vertices:
            f.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in tri.triangles + 1:
            f.write(f"f {t[0]} {t[1]} {t[2]}\n")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_provenance(path, tri: TriMesh) -> None:
    """CSV sidecar: vertex, edge ordinal, k1, k2, weight of k2."""
    if not tri.has_provenance:
        raise ValueError("triangle mesh has no tet-edge provenance")
    with open(path, "w") as f:
        f.write("vertex,edge,k1,k2,weight\n")
        for i in range(tri.n_vertices):
            f.write(f"{i},{tri.edge_ids[i]},{tri.endpoints[i, 0]},{tri.endpoints[i, 1]},"
                    f"{tri.weights[i]:.17g}\n")
