"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

import math

import numpy as np

from ..energy import normal_map_loss
from ..isosurface import EPS_GRAD, marching_tetrahedra, mt_vertex_jacobian
from ..render.backprop import backprop_pixels
from ..render.raster import rasterize


def fd_gradient_check(loss, phi, indices, h: float = 1e-6, floor: float = 1e-12,
                      analytic=None) -> tuple[float, np.ndarray, np.ndarray]:
    """Worst relative error between central differences and the analytic gradient.

    ``loss(phi)`` returns ``(value, grad)``. The relative error at index ``k``
    is ``|fd_k - g_k| / max(|fd_k|, |g_k|, floor)``. Returns
    ``(max_rel_err, fd, analytic)`` for the sampled indices.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    phi = np.array(phi, dtype=np.float64)
    if analytic is None:
        value, grad = loss(phi)
        if not math.isfinite(value):
            raise FloatingPointError("loss is not finite")
        analytic = np.asarray(grad)
    indices = np.asarray(indices, dtype=np.int64)
    fd = np.empty(len(indices))
    for n, k in enumerate(indices):
        old = phi[k]
        phi[k] = old + h
        fp = loss(phi)[0]
        phi[k] = old - h
        fm = loss(phi)[0]
        phi[k] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError("loss is not finite")
        fd[n] = (fp - fm) / (2 * h)
    an = analytic[indices]
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), floor)
    rel = np.abs(fd - an) / denom
    return float(rel.max(initial=0.0)), fd, an


def sample_support(grad, n: int, rng, rel_threshold: float = 1e-3) -> np.ndarray:
    """Up to ``n`` random indices where ``|grad|`` is at least ``rel_threshold``
    times its maximum; the entries a relative check is meaningful for."""
    g = np.abs(np.asarray(grad))
    if g.max(initial=0.0) == 0.0:
        return np.zeros(0, dtype=np.int64)
    cand = np.flatnonzero(g >= rel_threshold * g.max())
    return np.sort(rng.choice(cand, size=min(n, len(cand)), replace=False))


def normal_loss_closure(mesh, cam, target, eps_grad: float = EPS_GRAD):
    """``phi -> (loss, grad)`` for the end-to-end normal-map loss of one view:
    extraction, rendering, pixel backprop and the extraction Jacobian."""

    def loss(phi):
        tri = marching_tetrahedra(mesh, phi)
        pred = rasterize(tri, cam)
        value, g_pix = normal_map_loss(pred, target)
        g_v = backprop_pixels(tri, cam, pred, g_pix)
        return value, mt_vertex_jacobian(mesh, phi, tri, eps_grad).vjp(g_v)

    return loss
