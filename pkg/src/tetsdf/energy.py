"""Losses and regularizers on the tet-vertex field, with analytic gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .isosurface import EPS_CLAMP, EPS_GRAD, TriMesh, clamp_small_phi, marching_tetrahedra
from .mesh import TetMesh, check_field
from .render.camera import Camera
from .render.raster import NormalMap, rasterize


@dataclass
class EnergyConfig:
    eps_clamp: float = EPS_CLAMP
    eps_grad: float = EPS_GRAD
    eps_H: float | None = None  # default 1.5 x average edge length
    eps_s: float | None = None  # default 0.5 x average edge length
    gradH_floor: float = 1e-8
    weights: dict = field(default_factory=lambda: {
        "normal": 300.0, "eikonal": 150.0, "curvature": 0.0, "shrink": 20.0, "expand": 20.0,
        "multiview": 0.0, "anchor": 0.0,
    })

    def resolved(self, mesh: TetMesh) -> "EnergyConfig":
        """Copy with the mesh-dependent bandwidths filled in."""
        h = mesh.avg_edge_length
        cfg = EnergyConfig(self.eps_clamp, self.eps_grad,
                           1.5 * h if self.eps_H is None else self.eps_H,
                           0.5 * h if self.eps_s is None else self.eps_s,
                           self.gradH_floor, dict(self.weights))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for name in ("eps_clamp", "eps_grad", "eps_H", "eps_s", "gradH_floor"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")
        for k, w in self.weights.items():
            if not (math.isfinite(w) and w >= 0):
                raise ValueError(f"weight {k!r} must be finite and >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown energy config keys: {sorted(unknown)}")
        cfg = cls()
        for k, v in d.items():
            if k == "weights":
                cfg.weights.update(v)
            else:
                setattr(cfg, k, v)
        cfg.validate()
        return cfg


@dataclass
class EnergyResult:
    value: float
    grad_phi: np.ndarray

    def __add__(self, other: "EnergyResult") -> "EnergyResult":
        return EnergyResult(self.value + other.value, self.grad_phi + other.grad_phi)

    def scaled(self, w: float) -> "EnergyResult":
        return EnergyResult(w * self.value, w * self.grad_phi)


# ---------------------------------------------------------------------------
# normal-map loss
# ---------------------------------------------------------------------------


def normal_map_loss(pred: NormalMap, target: NormalMap) -> tuple[float, np.ndarray]:
    """Mean of ``1/2 |n_pred - n_gt|^2`` over pixels covered by both maps.

    Returns the value and dL/d(pred normals) (H, W, 3). Pixels covered by only
    one map are left to the silhouette losses.
    """
    if pred.shape != target.shape:
        raise ValueError(f"normal map size mismatch: {pred.shape} vs {target.shape}")
    both = pred.mask & target.mask
    count = int(both.sum())
    grad = np.zeros_like(pred.normals)
    if count == 0:
        return 0.0, grad
    d = pred.normals[both] - target.normals[both]
    grad[both] = d / count
    return float(0.5 * np.sum(d * d) / count), grad


# ---------------------------------------------------------------------------
# per-tet linear fits
# ---------------------------------------------------------------------------


def tet_linear_coeffs(u, s) -> np.ndarray:
    """Solve ``s_k = a x_k + b y_k + c z_k + d`` over the 4 tet vertices."""
    u = np.asarray(u, dtype=np.float64).reshape(4, 3)
    A = np.hstack([u, np.ones((4, 1))])
    if abs(np.linalg.det(A)) < 1e-15:
        raise np.linalg.LinAlgError("degenerate tetrahedron")
    return np.linalg.solve(A, np.asarray(s, dtype=np.float64))


def tet_gradients(mesh: TetMesh, values) -> np.ndarray:
    """Gradient of the per-tet linear interpolant of ``values`` (T, 3)."""
    return np.einsum("tij,tj->ti", mesh.gradient_operator, np.asarray(values)[mesh.tets])


def _scatter_tets(mesh: TetMesh, per_tet_vertex) -> np.ndarray:
    return np.bincount(mesh.tets.ravel(), weights=per_tet_vertex.ravel(), minlength=mesh.n_vertices)


def eikonal_energy(mesh: TetMesh, phi, variant: str = "E1c") -> EnergyResult:
    """Eikonal penalty on the per-tet gradient norm.

    ``E1a = 1/2 sum (|g| - 1)^2``, ``E1b = 1/2 sum (|g|^2 - 1)^2`` and
    ``E1c = 1/2 sum vol (|g|^2 - 1)^2``. E1a drops the gradient of tets with
    ``|g| < 1e-12``.
    """
    phi = check_field(mesh, phi)
    g = tet_gradients(mesh, phi)
    g2 = np.einsum("ti,ti->t", g, g)
    if variant == "E1a":
        gn = np.sqrt(g2)
        r = gn - 1.0
        value = 0.5 * np.sum(r * r)
        coef = np.where(gn < 1e-12, 0.0, r / np.where(gn < 1e-12, 1.0, gn))
    elif variant == "E1b":
        r = g2 - 1.0
        value = 0.5 * np.sum(r * r)
        coef = 2.0 * r
    elif variant == "E1c":
        r = g2 - 1.0
        vol = mesh.volumes
        value = 0.5 * np.sum(vol * r * r)
        coef = 2.0 * vol * r
    else:
        raise ValueError(f"unknown eikonal variant {variant!r}")
    # d/ds_k of the per-tet term: coef * g . G[:, :, k]
    per = np.einsum("t,ti,tik->tk", coef, g, mesh.gradient_operator)
    return EnergyResult(float(value), _scatter_tets(mesh, per))


def smeared_heaviside(phi, eps_H: float):
    phi = np.asarray(phi, dtype=np.float64)
    inner = 0.5 + phi / (2 * eps_H) + np.sin(np.pi * phi / eps_H) / (2 * np.pi)
    return np.where(phi < -eps_H, 0.0, np.where(phi > eps_H, 1.0, inner))


def smeared_heaviside_derivative(phi, eps_H: float):
    phi = np.asarray(phi, dtype=np.float64)
    inner = (1.0 + np.cos(np.pi * phi / eps_H)) / (2 * eps_H)
    return np.where(np.abs(phi) > eps_H, 0.0, inner)


def mean_curvature_energy(mesh: TetMesh, phi, cfg: EnergyConfig) -> EnergyResult:
    """``sum_t vol_t |grad H(phi)|``, a discrete surface area whose gradient
    flow is motion by mean curvature."""
    phi = check_field(mesh, phi)
    cfg = cfg.resolved(mesh) if cfg.eps_H is None else cfg
    h = smeared_heaviside(phi, cfg.eps_H)
    dh = smeared_heaviside_derivative(phi, cfg.eps_H)
    g = tet_gradients(mesh, h)
    gn = np.linalg.norm(g, axis=1)
    live = gn >= cfg.gradH_floor
    vol = mesh.volumes
    value = float(np.sum(vol[live] * gn[live]))
    coef = np.zeros(mesh.n_tets)
    coef[live] = vol[live] / gn[live]
    per = np.einsum("t,ti,tik->tk", coef, g, mesh.gradient_operator) * dh[mesh.tets]
    return EnergyResult(value, _scatter_tets(mesh, per))


# ---------------------------------------------------------------------------
# silhouettes
# ---------------------------------------------------------------------------


def _parent_vertices(tri: TriMesh, triangle_ids) -> np.ndarray:
    verts = np.unique(tri.triangles[np.unique(triangle_ids)])
    return np.unique(tri.endpoints[verts].ravel())


def inflate_field(mesh: TetMesh, phi, eps_s: float) -> np.ndarray:
    """Flip positive vertices with a negative one-ring neighbour to ``-eps_s``."""
    phi = np.asarray(phi, dtype=np.float64)
    k1, k2 = mesh.edges[:, 0], mesh.edges[:, 1]
    cross = (phi[k1] > 0) != (phi[k2] > 0)
    pos_end = np.where(phi[k1[cross]] > 0, k1[cross], k2[cross])
    temp = phi.copy()
    temp[np.unique(pos_end)] = -eps_s
    return temp


def inflated_surface(mesh: TetMesh, phi, eps_s: float, eps_clamp: float = EPS_CLAMP) -> TriMesh:
    temp = clamp_small_phi(inflate_field(mesh, phi, eps_s), eps_clamp)
    return marching_tetrahedra(mesh, temp, eps=eps_clamp)


def silhouette_sets(pred: NormalMap, target: NormalMap, mesh: TetMesh, phi, tri: TriMesh,
                    cam: Camera, eps_s: float, eps_clamp: float = EPS_CLAMP, inflated_tri: TriMesh | None = None):
    """Tet vertices to shrink and to expand so the silhouettes match.

    ``inflated_tri`` may carry a precomputed surface of the inflated field so
    several views can share one extraction. Returns ``(U_shrink, U_expand)``
    as sorted index arrays.
    """
    if pred.tri_index is None:
        raise ValueError("prediction has no fragment provenance")
    phi = check_field(mesh, phi)
    over = pred.mask & ~target.mask
    shrink = np.zeros(0, dtype=np.int64)
    if over.any():
        cand = _parent_vertices(tri, pred.tri_index[over])
        shrink = cand[phi[cand] < 0]

    expand = np.zeros(0, dtype=np.int64)
    under = target.mask & ~pred.mask
    if under.any():
        if inflated_tri is None:
            inflated_tri = inflated_surface(mesh, phi, eps_s, eps_clamp)
        inflated = rasterize(inflated_tri, cam)
        hit = under & inflated.mask
        if hit.any():
            cand = _parent_vertices(inflated_tri, inflated.tri_index[hit])
            # originally positive parents are the flipped ones; the still-positive
            # outer endpoints only locate the inflated surface
            flipped = (phi > 0) & (inflate_field(mesh, phi, eps_s) < 0)
            expand = cand[flipped[cand]]
    return shrink, expand


def shrink_loss(phi, U_shrink, eps_s: float) -> EnergyResult:
    """``1/2 sum (phi_k - eps_s)^2`` over ``U_shrink``."""
    phi = np.asarray(phi, dtype=np.float64)
    grad = np.zeros_like(phi)
    idx = np.asarray(U_shrink, dtype=np.int64)
    r = phi[idx] - eps_s
    grad[idx] = r
    return EnergyResult(float(0.5 * np.sum(r * r)), grad)


def expand_loss(phi, U_expand, eps_s: float) -> EnergyResult:
    """``1/2 sum (phi_k + eps_s)^2`` over ``U_expand``."""
    phi = np.asarray(phi, dtype=np.float64)
    grad = np.zeros_like(phi)
    idx = np.asarray(U_expand, dtype=np.int64)
    r = phi[idx] + eps_s
    grad[idx] = r
    return EnergyResult(float(0.5 * np.sum(r * r)), grad)


# ---------------------------------------------------------------------------
# multiview
# ---------------------------------------------------------------------------

MULTIVIEW_SMOOTHING = 1e-12


def multiview_consistency(fields_, reference: int) -> EnergyResult:
    """``sum_{c != ref} sqrt(|phi_ref - phi_c|^2 + 1e-12)``; gradient w.r.t. ``phi_ref``."""
    fields_ = [np.asarray(f, dtype=np.float64) for f in fields_]
    n = len(fields_[reference])
    if any(len(f) != n for f in fields_):
        raise ValueError("all per-view fields must have the same length")
    phi = fields_[reference]
    value = 0.0
    grad = np.zeros(n)
    for c, other in enumerate(fields_):
        if c == reference:
            continue
        d = phi - other
        norm = math.sqrt(float(d @ d) + MULTIVIEW_SMOOTHING)
        value += norm
        grad += d / norm
    return EnergyResult(value, grad)


def anchor_loss(phi, anchor) -> EnergyResult:
    """Quadratic pull ``1/2 |phi - anchor|^2`` toward a consensus field."""
    d = np.asarray(phi, dtype=np.float64) - np.asarray(anchor, dtype=np.float64)
    return EnergyResult(float(0.5 * d @ d), d)
