"""Rigid ICP and camera extrinsic refinement."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from ..render.camera import Camera


class DegeneratePointSetError(ValueError):
    pass


def best_fit_transform(src, dst):
    """Least-squares rotation and translation with ``R @ src + T ~ dst``
    (orthogonal Procrustes on the cross-covariance)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cd - R @ cs


def _check_points(p, name):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or len(p) < 3:
        raise DegeneratePointSetError(f"{name}: need at least 3 points in 3D")
    s = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegeneratePointSetError(f"{name}: points are collinear")
    return p


def icp_rigid_align(src, dst, max_iters: int = 100, tol: float = 1e-12):
    """Iterative closest point from ``src`` toward ``dst``.

    Returns ``(R, T, rms)`` where ``R @ src + T`` best matches ``dst``. Stops
    when the RMS residual changes by less than ``tol``.
    """
    src = _check_points(src, "src")
    dst = _check_points(dst, "dst")
    tree = cKDTree(dst)
    R, T = np.eye(3), np.zeros(3)
    prev = np.inf
    rms = np.inf
    for _ in range(max_iters):
        moved = src @ R.T + T
        dist, idx = tree.query(moved)
        rms = float(np.sqrt(np.mean(dist ** 2)))
        if abs(prev - rms) < tol:
            break
        prev = rms
        R, T = best_fit_transform(src, dst[idx])
    return R, T, rms


def apply_rigid(R, T, points):
    return np.asarray(points) @ np.asarray(R).T + T


def camera_after_mesh_motion(cam: Camera, R, T) -> Camera:
    """Camera that sees ``R x + T`` exactly as ``cam`` saw ``x``."""
    R_new = cam.R @ R.T
    return cam.with_extrinsics(R_new, cam.T - R_new @ T)


def refine_cameras(meshes, cameras, reference: int = 0, max_outer: int = 10, tol: float = 1e-10,
                   icp_iters: int = 100):
    """Rigidly align every per-view mesh to the reference view's mesh and move
    each camera by the same motion.

    ``meshes`` are per-view vertex arrays (or TriMesh objects) reconstructed in
    world space with the given cameras. Returns ``(cameras, history)`` where
    history holds the mean inter-mesh RMS before and after each outer
    iteration.
    """
    pts = [np.asarray(getattr(m, "vertices", m), dtype=np.float64) for m in meshes]
    cams = list(cameras)

    def mean_rms():
        tree = cKDTree(pts[reference])
        r = [np.sqrt(np.mean(tree.query(pts[c])[0] ** 2)) for c in range(len(pts)) if c != reference]
        return float(np.mean(r)) if r else 0.0

    history = [mean_rms()]
    for _ in range(max_outer):
        largest = 0.0
        for c in range(len(pts)):
            if c == reference:
                continue
            R, T, _ = icp_rigid_align(pts[c], pts[reference], max_iters=icp_iters)
            pts[c] = apply_rigid(R, T, pts[c])
            cams[c] = camera_after_mesh_motion(cams[c], R, T)
            largest = max(largest, float(np.linalg.norm(T)), float(np.linalg.norm(R - np.eye(3))))
        history.append(mean_rms())
        if largest < tol:
            break
    return cams, history
