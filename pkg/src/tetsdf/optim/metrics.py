"""Image-space error metrics between predicted and target renders."""

from __future__ import annotations

import numpy as np

from ..render.raster import NormalMap

# thickness of the tet shell, used as the depth error of silhouette mismatches
MISMATCH_DEPTH = 0.2


def _check(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"image size mismatch: {np.shape(a)} vs {np.shape(b)}")


def e_normal(pred: NormalMap, target: NormalMap) -> float:
    """Mean over all pixels of ``(1/2 (1 - n_pred . n_gt))^2``.

    The dot product is -1 where exactly one map covers the pixel and 1 where
    neither does. On shared pixels ``1/2 (1 - n.m)`` is evaluated as
    ``|n - m|^2 / 4``, equal for unit vectors and exactly zero for identical ones.
    """
    _check(pred.mask, target.mask)
    half = np.einsum("hwc,hwc->hw", pred.normals - target.normals, pred.normals - target.normals) / 4.0
    half = np.minimum(half, 1.0)
    half = np.where(pred.mask & target.mask, half, np.where(pred.mask | target.mask, 1.0, 0.0))
    return float(np.mean(half ** 2))


def e_depth(pred_depth, target_depth, pred_mask=None, target_mask=None,
            mismatch: float = MISMATCH_DEPTH) -> float:
    """Mean squared depth error in meters^2 over all pixels.

    Masks default to the finite entries of each depth map. Pixels covered by
    exactly one map score ``mismatch**2``.
    """
    pd = np.asarray(pred_depth, dtype=np.float64)
    td = np.asarray(target_depth, dtype=np.float64)
    _check(pd, td)
    pm = np.isfinite(pd) if pred_mask is None else np.asarray(pred_mask, dtype=bool)
    tm = np.isfinite(td) if target_mask is None else np.asarray(target_mask, dtype=bool)
    both = pm & tm
    err = np.zeros(pd.shape)
    err[both] = pd[both] - td[both]
    err[pm ^ tm] = mismatch
    return float(np.mean(err ** 2))


def silhouette_mismatch(pred: NormalMap, target: NormalMap) -> int:
    return int(np.count_nonzero(pred.mask ^ target.mask))
