"""Direct optimization of the tet-vertex field against target normal maps.

Each iteration extracts the surface, renders every view, pulls the pixel
gradients back through the rasterizer and the Marching Tetrahedra Jacobian,
adds the silhouette and regularizer gradients, and takes a clipped descent
step. The total loss is not guaranteed to decrease monotonically: the
silhouette sets and the extracted topology change between iterations.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ..energy import (
    EnergyConfig, anchor_loss, eikonal_energy, expand_loss, inflated_surface,
    mean_curvature_energy, multiview_consistency, normal_map_loss, shrink_loss, silhouette_sets,
    tet_gradients,
)
from ..isosurface import TriMesh, clamp_small_phi, marching_tetrahedra, mt_vertex_jacobian
from ..mesh import TetMesh, check_field, write_field
from ..render.backprop import backprop_pixels
from ..render.camera import Camera
from ..render.raster import NormalMap, rasterize
from .metrics import e_depth, e_normal, silhouette_mismatch

TERMS = ("normal", "eikonal", "curvature", "shrink", "expand", "multiview", "anchor")


class DivergenceError(FloatingPointError):
    """Raised when the loss blows up; ``report`` holds the iterations run so far."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class View:
    camera: Camera
    target: NormalMap


@dataclass
class FitConfig:
    iterations: int = 300
    step: float = 2e-2
    step_decay: float = 1.0  # step at iteration k is step * step_decay**k
    clip: float = 0.1  # gradient entries are clipped to [-clip, clip]
    momentum: float = 0.0  # heavy-ball coefficient, 0 disables
    eikonal_variant: str = "E1c"
    mode: str = "shared"  # "shared" or "per_view"
    reference_view: int = 0
    views: list | None = None  # indices into the view list, None = all
    checkpoint_every: int = 0
    divergence_threshold: float = 1e6
    energy: EnergyConfig = field(default_factory=EnergyConfig)

    def validate(self) -> None:
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0 < self.step_decay <= 1:
            raise ValueError("step_decay must lie in (0, 1]")
        if not self.clip > 0:
            raise ValueError("clip must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.mode not in ("shared", "per_view"):
            raise ValueError(f"unknown fit mode {self.mode!r}")
        if self.eikonal_variant not in ("E1a", "E1b", "E1c"):
            raise ValueError(f"unknown eikonal variant {self.eikonal_variant!r}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        self.energy.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown fit config keys: {sorted(unknown)}")
        energy = EnergyConfig.from_dict(d.pop("energy", {}))
        cfg = cls(energy=energy, **d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitReport:
    terms: dict  # term name -> list of per-iteration values (weighted)
    total: list
    mismatch: list  # silhouette mismatch pixels summed over views
    eikonal_residual: list  # mean | |grad phi|^2 - 1 | per iteration
    phi: np.ndarray
    e_normal: list = field(default_factory=list)
    e_depth: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    iterations: int = 0
    status: str = "ok"

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations, "status": self.status,
            "final_total": self.total[-1] if self.total else None,
            "e_normal": self.e_normal, "e_depth": self.e_depth,
            "mean_e_normal": float(np.mean(self.e_normal)) if self.e_normal else None,
            "terms": self.terms, "total": self.total, "mismatch": self.mismatch,
            "eikonal_residual": self.eikonal_residual, "timings": self.timings,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def records(self):
        """``{"step", "term", "value"}`` rows: the weighted terms, then the
        total, silhouette mismatch and Eikonal residual of every iteration."""
        for k in range(len(self.total)):
            for t, v in self.terms.items():
                yield {"step": k, "term": t, "value": v[k]}
            yield {"step": k, "term": "total", "value": self.total[k]}
            yield {"step": k, "term": "mismatch", "value": self.mismatch[k]}
            yield {"step": k, "term": "eikonal_residual", "value": self.eikonal_residual[k]}

    def write_ndjson(self, path) -> None:
        with open(path, "w") as f:
            for row in self.records():
                f.write(json.dumps(row) + "\n")


# ---------------------------------------------------------------------------
# per-field loss
# ---------------------------------------------------------------------------


@dataclass
class SceneLoss:
    """Loss terms and the total gradient for one field over a set of views."""

    value: float
    grad: np.ndarray
    terms: dict
    mismatch: int
    surface: TriMesh
    renders: list


def extract(mesh: TetMesh, phi, cfg: EnergyConfig) -> TriMesh:
    return marching_tetrahedra(mesh, phi, eps=cfg.eps_clamp)


def scene_loss(mesh: TetMesh, phi, views, ecfg: EnergyConfig, eikonal_variant: str = "E1c") -> SceneLoss:
    """Weighted sum of the normal-map, silhouette, Eikonal and curvature terms.

    ``ecfg`` must already be resolved against ``mesh``. The normal-map term
    is averaged over views.
    """
    w = ecfg.weights
    n = mesh.n_vertices
    tri = extract(mesh, phi, ecfg)
    terms = dict.fromkeys(TERMS, 0.0)
    grad = np.zeros(n)
    grad_v = np.zeros((tri.n_vertices, 3))
    mismatch = 0
    renders = []
    shrink_set, expand_set = [], []
    inflated = None
    need_sil = w.get("shrink", 0) > 0 or w.get("expand", 0) > 0
    for view in views:
        pred = rasterize(tri, view.camera)
        renders.append(pred)
        mismatch += silhouette_mismatch(pred, view.target)
        if w.get("normal", 0) > 0:
            value, g_pix = normal_map_loss(pred, view.target)
            terms["normal"] += w["normal"] * value / len(views)
            if value > 0:
                grad_v += backprop_pixels(tri, view.camera, pred, g_pix * (w["normal"] / len(views)))
        if need_sil:
            if inflated is None and np.any(view.target.mask & ~pred.mask):
                inflated = inflated_surface(mesh, phi, ecfg.eps_s, ecfg.eps_clamp)
            s, e = silhouette_sets(pred, view.target, mesh, phi, tri, view.camera, ecfg.eps_s,
                                   ecfg.eps_clamp, inflated_tri=inflated)
            shrink_set.append(s)
            expand_set.append(e)
    if tri.n_vertices and np.any(grad_v):
        grad += mt_vertex_jacobian(mesh, phi, tri, ecfg.eps_grad).vjp(grad_v)

    parts = []
    if need_sil:
        us = np.unique(np.concatenate(shrink_set)) if shrink_set else np.zeros(0, dtype=np.int64)
        ue = np.unique(np.concatenate(expand_set)) if expand_set else np.zeros(0, dtype=np.int64)
        # a vertex flagged both ways keeps neither target
        both = np.intersect1d(us, ue)
        us, ue = np.setdiff1d(us, both), np.setdiff1d(ue, both)
        parts.append(("shrink", shrink_loss(phi, us, ecfg.eps_s)))
        parts.append(("expand", expand_loss(phi, ue, ecfg.eps_s)))
    if w.get("eikonal", 0) > 0:
        parts.append(("eikonal", eikonal_energy(mesh, phi, eikonal_variant)))
    if w.get("curvature", 0) > 0:
        parts.append(("curvature", mean_curvature_energy(mesh, phi, ecfg)))
    for name, res in parts:
        res = res.scaled(w.get(name, 0.0))
        terms[name] = res.value
        grad += res.grad_phi
    return SceneLoss(sum(terms.values()), grad, terms, mismatch, tri, renders)


def eikonal_residual(mesh: TetMesh, phi) -> float:
    g = tet_gradients(mesh, phi)
    return float(np.mean(np.abs(np.einsum("ti,ti->t", g, g) - 1.0)))


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def _check_views(views):
    if len(views) == 0:
        raise ValueError("fit needs at least one view")
    for v in views:
        if v.target.shape != (v.camera.height, v.camera.width):
            raise ValueError("target size does not match its camera")


def fit_sdf(mesh: TetMesh, phi0, views, cfg: FitConfig | None = None, anchor=None,
            checkpoint_dir=None, callback=None) -> FitReport:
    """Fit the field on ``mesh`` so its rendered normals match ``views``.

    ``views`` is a list of :class:`View`. In ``shared`` mode one field is
    optimized against all views. In ``per_view`` mode each view owns a copy
    of the field and the copies are coupled by the multiview consistency
    term; the reported field is their mean. Raises :class:`DivergenceError`
    if the loss exceeds ``cfg.divergence_threshold`` or turns non-finite.
    """
    cfg = FitConfig() if cfg is None else cfg
    cfg.validate()
    views = list(views) if cfg.views is None else [views[i] for i in cfg.views]
    _check_views(views)
    ecfg = cfg.energy.resolved(mesh)
    phi0 = check_field(mesh, phi0).copy()
    if anchor is None:
        anchor = phi0
    anchor = check_field(mesh, anchor)

    if cfg.mode == "shared":
        groups = [views]
    else:
        groups = [[v] for v in views]
    fields_ = [phi0.copy() for _ in groups]
    velocity = [np.zeros_like(phi0) for _ in groups]
    ref = cfg.reference_view if cfg.mode == "per_view" else 0
    if not 0 <= ref < len(groups):
        raise ValueError("reference_view out of range")

    report = FitReport({t: [] for t in TERMS}, [], [], [], phi0.copy())
    t_start = time.perf_counter()
    t_loss = 0.0
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        fields_ = [clamp_small_phi(f, ecfg.eps_grad) for f in fields_]
        losses = [scene_loss(mesh, f, g, ecfg, cfg.eikonal_variant) for f, g in zip(fields_, groups)]
        grads = [l.grad for l in losses]
        terms = dict.fromkeys(TERMS, 0.0)
        for l in losses:
            for k, v in l.terms.items():
                terms[k] += v
        w_mv = ecfg.weights.get("multiview", 0.0)
        if len(fields_) > 1 and w_mv > 0:
            for c in range(len(fields_)):
                mv = multiview_consistency(fields_, c).scaled(w_mv)
                grads[c] = grads[c] + mv.grad_phi
                terms["multiview"] += 0.5 * mv.value  # each pair is seen from both ends
        w_an = ecfg.weights.get("anchor", 0.0)
        if w_an > 0:
            for c in range(len(fields_)):
                an = anchor_loss(fields_[c], anchor).scaled(w_an)
                grads[c] = grads[c] + an.grad_phi
                terms["anchor"] += an.value
        t_loss += time.perf_counter() - t0

        total = float(sum(terms.values()))
        for k in TERMS:
            report.terms[k].append(float(terms[k]))
        report.total.append(total)
        report.mismatch.append(int(sum(l.mismatch for l in losses)))
        report.eikonal_residual.append(eikonal_residual(mesh, fields_[ref]))
        report.iterations = it + 1
        if not math.isfinite(total) or total > cfg.divergence_threshold or \
                not all(np.all(np.isfinite(g)) for g in grads):
            report.status = "diverged"
            report.phi = np.mean(fields_, axis=0)
            report.timings = {"total_s": time.perf_counter() - t_start, "loss_s": t_loss}
            raise DivergenceError(f"loss diverged at iteration {it}: {total:g}", report)

        lr = cfg.step * cfg.step_decay ** it
        for c in range(len(fields_)):
            g = np.clip(grads[c], -cfg.clip, cfg.clip)
            velocity[c] = cfg.momentum * velocity[c] + g
            fields_[c] = clamp_small_phi(fields_[c] - lr * velocity[c], ecfg.eps_grad)

        if callback is not None:
            callback(it, total, terms)
        if checkpoint_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            write_field(Path(checkpoint_dir) / f"phi_{it + 1:06d}.bin", np.mean(fields_, axis=0))

    phi = fields_[0] if len(fields_) == 1 else np.mean(fields_, axis=0)
    if cfg.iterations:
        phi = clamp_small_phi(phi, ecfg.eps_grad)
    report.phi = phi
    t_eval = time.perf_counter()
    ev = evaluate_views(mesh, phi, views, ecfg)
    report.e_normal = [e["e_normal"] for e in ev]
    report.e_depth = [e["e_depth"] for e in ev]
    now = time.perf_counter()
    report.timings = {"total_s": now - t_start, "loss_s": t_loss, "eval_s": now - t_eval,
                      "per_iteration_s": t_loss / max(cfg.iterations, 1)}
    return report


def evaluate_views(mesh: TetMesh, phi, views, ecfg: EnergyConfig | None = None) -> list[dict]:
    """``e_normal`` and ``e_depth`` of the extracted surface against each view.

    ``e_depth`` is None when the target carries no depth. The field is
    clamped at ``eps_grad`` for the extraction so that values within
    roundoff of zero do not produce zero-area triangles.
    """
    ecfg = EnergyConfig() if ecfg is None else ecfg
    phi = clamp_small_phi(check_field(mesh, phi), ecfg.eps_grad)
    tri = marching_tetrahedra(mesh, phi, eps=ecfg.eps_clamp)
    out = []
    for v in views:
        pred = rasterize(tri, v.camera)
        en = e_normal(pred, v.target)
        ed = None
        if np.all(np.isfinite(v.target.depth[v.target.mask])) and v.target.mask.any():
            ed = e_depth(pred.depth_meters(v.camera), v.target.depth_meters(v.camera),
                         pred.mask, v.target.mask)
        out.append({"e_normal": en, "e_depth": ed, "mismatch": silhouette_mismatch(pred, v.target)})
    return out


# ---------------------------------------------------------------------------
# synthetic targets
# ---------------------------------------------------------------------------


def sphere_target(cam: Camera, center=(0.0, 0.0, 0.0), radius: float = 1.0) -> NormalMap:
    """Exact normal and depth map of a sphere by per-pixel ray intersection."""
    d = cam.pixel_rays()  # camera space, z = 1
    c = cam.to_camera(np.asarray(center, dtype=np.float64)[None])[0]
    a = np.einsum("hwc,hwc->hw", d, d)
    b = np.einsum("hwc,c->hw", d, c)
    disc = b * b - a * (c @ c - radius * radius)
    hit = disc >= 0
    t = np.where(hit, (b - np.sqrt(np.where(hit, disc, 0.0))) / a, np.inf)
    hit &= (t >= cam.near) & (t <= cam.far)  # z_c equals t because d_z = 1
    nm = NormalMap.empty(cam.height, cam.width)
    p = d[hit] * t[hit, None]
    nm.normals[hit] = (p - c) / radius
    nm.mask = hit
    nm.depth[hit] = cam.ndc_depth(t[hit])
    nm.tri_index = None
    nm.alphas = None
    return nm


def sphere_surface_distance(tri: TriMesh, center=(0.0, 0.0, 0.0), radius: float = 1.0,
                            n_samples: int = 20000, seed: int = 0) -> dict:
    """Symmetric distances between ``tri`` and a sphere.

    Mesh-to-sphere distance is exact per vertex. Sphere-to-mesh distance uses
    random sphere samples against the mesh vertices, which over-estimates
    the true point-to-surface distance. Returns the symmetric mean and the
    symmetric maximum (Hausdorff bound).
    """
    if tri.n_vertices == 0:
        return {"mean": math.inf, "hausdorff": math.inf}
    c = np.asarray(center, dtype=np.float64)
    d1 = np.abs(np.linalg.norm(tri.vertices - c, axis=1) - radius)
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(n_samples, 3))
    s = c + radius * s / np.linalg.norm(s, axis=1, keepdims=True)
    d2, _ = cKDTree(tri.vertices).query(s)
    return {"mean": float(max(d1.mean(), d2.mean())), "hausdorff": float(max(d1.max(), d2.max()))}
