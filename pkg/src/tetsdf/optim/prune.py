"""Removal of visible triangles that disagree with a target normal map."""

from __future__ import annotations

import numpy as np

from ..isosurface import TriMesh
from ..render.camera import Camera
from ..render.raster import NormalMap, rasterize


def triangle_angular_errors(tri: TriMesh, cam: Camera, target: NormalMap, rendered: NormalMap | None = None):
    """Mean angular error (degrees) over each triangle's rendered pixels.

    Pixels the target does not cover count as 180 degrees. Triangles with no
    rendered pixel get NaN.
    """
    nm = rasterize(tri, cam) if rendered is None else rendered
    rows, cols = np.nonzero(nm.mask)
    fid = nm.tri_index[rows, cols]
    dot = np.einsum("pc,pc->p", nm.normals[rows, cols], target.normals[rows, cols])
    ang = np.degrees(np.arccos(np.clip(dot, -1.0, 1.0)))
    ang = np.where(target.mask[rows, cols], ang, 180.0)
    total = np.bincount(fid, weights=ang, minlength=tri.n_triangles)
    count = np.bincount(fid, minlength=tri.n_triangles)
    out = np.full(tri.n_triangles, np.nan)
    seen = count > 0
    out[seen] = total[seen] / count[seen]
    return out


def prune_inconsistent_triangles(tri: TriMesh, cam: Camera, target: NormalMap, tol_deg: float) -> TriMesh:
    """Drop visible triangles whose mean angular error exceeds ``tol_deg``.

    The result is generally not watertight.
    """
    if not tol_deg > 0:
        raise ValueError("tol_deg must be positive")
    err = triangle_angular_errors(tri, cam, target)
    remove = np.nan_to_num(err, nan=-1.0) > tol_deg
    return tri.subset(~remove)
