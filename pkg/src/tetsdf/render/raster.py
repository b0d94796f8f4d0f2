"""Z-buffered scanline rasterization of camera-space normal maps."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from ..isosurface import TriMesh
from .camera import Camera

BAND_ROWS = 8


class DegenerateNormalError(ValueError):
    pass


@dataclass(eq=False)
class NormalMap:
    """Per-pixel render output, also used for supervision targets.

    Uncovered pixels carry zero normals, ``depth = inf``, ``tri_index = -1``
    and zero barycentrics. ``depth`` is NDC depth in [0, 1]. ``alphas`` are
    the unnormalized world-space barycentrics of the winning triangle.
    """

    normals: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) bool
    depth: np.ndarray  # (H, W)
    tri_index: np.ndarray | None = None  # (H, W) int64
    alphas: np.ndarray | None = None  # (H, W, 3)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @classmethod
    def empty(cls, height: int, width: int) -> "NormalMap":
        return cls(np.zeros((height, width, 3)), np.zeros((height, width), dtype=bool),
                   np.full((height, width), np.inf), np.full((height, width), -1, dtype=np.int64),
                   np.zeros((height, width, 3)))

    def depth_meters(self, cam: Camera) -> np.ndarray:
        """Camera-space depth (inf where uncovered)."""
        out = np.full(self.depth.shape, np.inf)
        out[self.mask] = cam.camera_depth(self.depth[self.mask])
        return out


@numba.njit(cache=True)
def _accumulate_face_normals(vertices, tris, acc):
    # sequential in face order, so the sums do not depend on threading
    for t in range(tris.shape[0]):
        a, b, c = tris[t, 0], tris[t, 1], tris[t, 2]
        e1x = vertices[b, 0] - vertices[a, 0]
        e1y = vertices[b, 1] - vertices[a, 1]
        e1z = vertices[b, 2] - vertices[a, 2]
        e2x = vertices[c, 0] - vertices[a, 0]
        e2y = vertices[c, 1] - vertices[a, 1]
        e2z = vertices[c, 2] - vertices[a, 2]
        nx = e1y * e2z - e1z * e2y
        ny = e1z * e2x - e1x * e2z
        nz = e1x * e2y - e1y * e2x
        for v in (a, b, c):
            acc[v, 0] += nx
            acc[v, 1] += ny
            acc[v, 2] += nz


def vertex_normals(tri: TriMesh, check: bool = True) -> np.ndarray:
    """Area-weighted unit vertex normals (unreferenced vertices get zeros).

    Face normals are unnormalized cross products; the 1/2 of the area cancels
    after normalization.
    """
    n = tri.n_vertices
    acc = np.zeros((n, 3))
    if tri.n_triangles:
        _accumulate_face_normals(np.ascontiguousarray(tri.vertices, dtype=np.float64),
                                 np.ascontiguousarray(tri.triangles, dtype=np.int64), acc)
    norm = np.linalg.norm(acc, axis=1)
    used = np.zeros(n, dtype=bool)
    used[tri.triangles.ravel()] = True
    if check and np.any(norm[used] < 1e-12):
        raise DegenerateNormalError("vertex normal with norm < 1e-12 (degenerate geometry)")
    out = np.zeros_like(acc)
    ok = norm > 0
    out[ok] = acc[ok] / norm[ok, None]
    return out


@numba.njit(cache=True)
def _area2d(ax, ay, bx, by, cx, cy):
    return -0.5 * ((bx - ax) * (cy - ay) - (by - ay) * (cx - ax))


@numba.njit(cache=True, parallel=True)
def _zbuffer_kernel(xs, ys, zn, zc, tris, width, height, near, far, tri_id, zbuf):
    n_tri = tris.shape[0]
    # per-triangle setup
    valid = np.zeros(n_tri, dtype=np.bool_)
    ymin = np.zeros(n_tri, dtype=np.int64)
    ymax = np.zeros(n_tri, dtype=np.int64)
    for t in range(n_tri):
        a, b, c = tris[t, 0], tris[t, 1], tris[t, 2]
        if (zc[a] < near or zc[b] < near or zc[c] < near
                or zc[a] > far or zc[b] > far or zc[c] > far):
            continue
        area = _area2d(xs[a], ys[a], xs[b], ys[b], xs[c], ys[c])
        if not area > 0.0:
            continue
        y0 = min(ys[a], min(ys[b], ys[c]))
        y1 = max(ys[a], max(ys[b], ys[c]))
        r0 = max(int(np.ceil(y0 - 0.5)), 0)
        r1 = min(int(np.floor(y1 - 0.5)), height - 1)
        if r1 < r0:
            continue
        valid[t] = True
        ymin[t] = r0
        ymax[t] = r1

    n_bands = (height + 7) // 8
    # each band walks the triangles in index order: output does not depend on
    # the thread count and ties keep the lowest triangle index
    for band in numba.prange(n_bands):
        row0 = band * 8
        row1 = min(row0 + 8, height) - 1
        for t in range(n_tri):
            if not valid[t] or ymax[t] < row0 or ymin[t] > row1:
                continue
            a, b, c = tris[t, 0], tris[t, 1], tris[t, 2]
            xa, ya, xb, yb, xc, yc = xs[a], ys[a], xs[b], ys[b], xs[c], ys[c]
            area = _area2d(xa, ya, xb, yb, xc, yc)
            x0 = min(xa, min(xb, xc))
            x1 = max(xa, max(xb, xc))
            c0 = max(int(np.ceil(x0 - 0.5)), 0)
            c1 = min(int(np.floor(x1 - 0.5)), width - 1)
            r0 = max(ymin[t], row0)
            r1 = min(ymax[t], row1)
            for r in range(r0, r1 + 1):
                py = r + 0.5
                for col in range(c0, c1 + 1):
                    px = col + 0.5
                    w1 = _area2d(px, py, xb, yb, xc, yc)
                    if w1 < 0.0:
                        continue
                    w2 = _area2d(xa, ya, px, py, xc, yc)
                    if w2 < 0.0:
                        continue
                    w3 = _area2d(xa, ya, xb, yb, px, py)
                    if w3 < 0.0:
                        continue
                    z = (w1 * zn[a] + w2 * zn[b] + w3 * zn[c]) / area
                    if z < zbuf[r, col]:
                        zbuf[r, col] = z
                        tri_id[r, col] = t


def screen_vertices(tri: TriMesh, cam: Camera):
    vc = cam.to_camera(tri.vertices)
    xs, ys, zn, zc = cam.project(vc)
    return vc, xs, ys, zn, zc


def pixel_alphas(xs, ys, zc, tris, rows, cols):
    """Unnormalized world barycentrics at pixel centers (perspective-correct
    through the camera depths of the other two vertices)."""
    px = cols + 0.5
    py = rows + 0.5
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    xa, ya, xb, yb, xc, yc = xs[a], ys[a], xs[b], ys[b], xs[c], ys[c]

    def area(ax, ay, bx, by, cx, cy):
        return -0.5 * ((bx - ax) * (cy - ay) - (by - ay) * (cx - ax))

    al = np.empty((len(rows), 3))
    al[:, 0] = zc[b] * zc[c] * area(px, py, xb, yb, xc, yc)
    al[:, 1] = zc[a] * zc[c] * area(xa, ya, px, py, xc, yc)
    al[:, 2] = zc[a] * zc[b] * area(xa, ya, xb, yb, px, py)
    return al


def rasterize(tri: TriMesh, cam: Camera, vertex_normals_override=None) -> NormalMap:
    """Render a camera-space normal map of ``tri``.

    Back-facing and degenerate triangles are skipped, as are triangles with
    any vertex outside ``[near, far]`` (no clipping). Each pixel center keeps
    the triangle with the smallest interpolated NDC depth; ties go to the
    lower triangle index.
    """
    H, W = cam.height, cam.width
    nm = NormalMap.empty(H, W)
    if tri.n_triangles == 0:
        return nm
    _, xs, ys, zn, zc = screen_vertices(tri, cam)
    tris = np.ascontiguousarray(tri.triangles, dtype=np.int64)
    tri_id = nm.tri_index
    zbuf = nm.depth
    _zbuffer_kernel(xs, ys, zn, zc, tris, W, H, cam.near, cam.far, tri_id, zbuf)

    mask = tri_id >= 0
    nm.mask = mask
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        return nm
    fid = tri_id[rows, cols]
    ftris = tris[fid]
    al = pixel_alphas(xs, ys, zc, ftris, rows, cols)
    vn = vertex_normals(tri) if vertex_normals_override is None else np.asarray(vertex_normals_override)
    s = np.einsum("pk,pkc->pc", al, vn[ftris])
    s /= np.linalg.norm(s, axis=1, keepdims=True)
    nm.normals[rows, cols] = s @ cam.R.T
    nm.alphas[rows, cols] = al
    return nm


def set_threads(n: int | None) -> None:
    if n:
        numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))
