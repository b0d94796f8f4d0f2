"""Brute-force ray casting against every triangle; a test oracle for rasterize."""

from __future__ import annotations

import numba
import numpy as np

from ..isosurface import TriMesh
from .camera import Camera
from .raster import NormalMap, vertex_normals


@numba.njit(cache=True)
def _cast(origin, dirs, v0, v1, v2, t_out, id_out):
    n_rays = dirs.shape[0]
    n_tri = v0.shape[0]
    for r in range(n_rays):
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        best = np.inf
        best_id = -1
        for t in range(n_tri):
            e1x = v1[t, 0] - v0[t, 0]
            e1y = v1[t, 1] - v0[t, 1]
            e1z = v1[t, 2] - v0[t, 2]
            e2x = v2[t, 0] - v0[t, 0]
            e2y = v2[t, 1] - v0[t, 1]
            e2z = v2[t, 2] - v0[t, 2]
            px = dy * e2z - dz * e2y
            py = dz * e2x - dx * e2z
            pz = dx * e2y - dy * e2x
            det = e1x * px + e1y * py + e1z * pz
            # det = -d . n, so back-facing and edge-on triangles have det <= 0
            if det <= 0.0:
                continue
            inv = 1.0 / det
            sx = origin[0] - v0[t, 0]
            sy = origin[1] - v0[t, 1]
            sz = origin[2] - v0[t, 2]
            u = (sx * px + sy * py + sz * pz) * inv
            if u < 0.0 or u > 1.0:
                continue
            qx = sy * e1z - sz * e1y
            qy = sz * e1x - sx * e1z
            qz = sx * e1y - sy * e1x
            v = (dx * qx + dy * qy + dz * qz) * inv
            if v < 0.0 or u + v > 1.0:
                continue
            tt = (e2x * qx + e2y * qy + e2z * qz) * inv
            if tt > 0.0 and tt < best:
                best = tt
                best_id = t
        t_out[r] = best
        id_out[r] = best_id


def _tri_area(a, b, c):
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)


def raytrace_oracle(tri: TriMesh, cam: Camera, normalize: bool = True) -> NormalMap:
    """Normal map by casting one ray per pixel center, skipping back faces.

    Barycentrics come from 3D sub-triangle areas at the hit point. With
    ``normalize=False`` the division by the full triangle area is skipped,
    which must not change the resulting unit normals.
    """
    H, W = cam.height, cam.width
    nm = NormalMap.empty(H, W)
    if tri.n_triangles == 0:
        return nm
    # world-space rays from the aperture through the pixel centers
    d_c = cam.pixel_rays().reshape(-1, 3)
    dirs = np.ascontiguousarray(d_c @ cam.R)  # R^T d
    origin = cam.center
    v = tri.vertices[tri.triangles]
    t_hit = np.empty(len(dirs))
    ids = np.empty(len(dirs), dtype=np.int64)
    _cast(origin, dirs, np.ascontiguousarray(v[:, 0]), np.ascontiguousarray(v[:, 1]),
          np.ascontiguousarray(v[:, 2]), t_hit, ids)

    hit = ids >= 0
    # the ray direction has unit camera z, so t is the camera depth
    zc = t_hit[hit]
    inside = (zc >= cam.near) & (zc <= cam.far)
    hit_idx = np.flatnonzero(hit)[inside]
    zc = zc[inside]
    fid = ids[hit_idx]
    p = origin + t_hit[hit_idx, None] * dirs[hit_idx]
    a, b, c = v[fid, 0], v[fid, 1], v[fid, 2]
    w = np.stack([_tri_area(p, b, c), _tri_area(a, p, c), _tri_area(a, b, p)], axis=1)
    if normalize:
        w = w / _tri_area(a, b, c)[:, None]
    vn = vertex_normals(tri)
    s = np.einsum("pk,pkc->pc", w, vn[tri.triangles[fid]])
    s /= np.linalg.norm(s, axis=1, keepdims=True)

    rows, cols = np.divmod(hit_idx, W)
    nm.mask[rows, cols] = True
    nm.normals[rows, cols] = s @ cam.R.T
    nm.depth[rows, cols] = cam.ndc_depth(zc)
    nm.tri_index[rows, cols] = fid
    nm.alphas[rows, cols] = w
    return nm


def hit_points(nm: NormalMap, tri: TriMesh) -> np.ndarray:
    """World positions reconstructed from stored barycentrics (H, W, 3)."""
    out = np.full(nm.mask.shape + (3,), np.nan)
    rows, cols = np.nonzero(nm.mask)
    al = nm.alphas[rows, cols]
    al = al / al.sum(axis=1, keepdims=True)
    v = tri.vertices[tri.triangles[nm.tri_index[rows, cols]]]
    out[rows, cols] = np.einsum("pk,pkc->pc", al, v)
    return out
