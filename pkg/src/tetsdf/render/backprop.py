"""Reverse-mode derivative of rendered pixel normals with respect to world vertices.

Visibility is held fixed: each covered pixel keeps its triangle, and only the
barycentrics and vertex normals move. Coverage changes at silhouettes get no
gradient here.
"""

from __future__ import annotations

import numpy as np

from ..isosurface import TriMesh
from .camera import Camera
from .raster import NormalMap, pixel_alphas, screen_vertices, vertex_normals


def _darea(ax, ay, bx, by, cx, cy):
    """Partials of the signed screen area ``-1/2 det`` w.r.t. (a, b, c)."""
    return (
        -0.5 * (by - cy), -0.5 * (cx - bx),
        -0.5 * (cy - ay), 0.5 * (cx - ax),
        0.5 * (by - ay), -0.5 * (bx - ax),
    )


def _scatter(n, idx, vals):
    out = np.empty((n, 3))
    for c in range(3):
        out[:, c] = np.bincount(idx, weights=vals[:, c], minlength=n)
    return out


def vertex_normals_vjp(tri: TriMesh, grad_unit_normals) -> np.ndarray:
    """Pull dL/d(unit vertex normals) back to dL/d(vertex positions)."""
    n = tri.n_vertices
    fn = tri.face_normals()
    idx = tri.triangles.ravel()
    acc = np.empty((n, 3))
    for c in range(3):
        acc[:, c] = np.bincount(idx, weights=np.repeat(fn[:, c], 3), minlength=n)
    norm = np.linalg.norm(acc, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    nhat = acc / safe[:, None]
    g = np.asarray(grad_unit_normals)
    g_acc = (g - nhat * np.einsum("ij,ij->i", nhat, g)[:, None]) / safe[:, None]
    g_acc[norm == 0] = 0.0

    # face normal (b - a) x (c - a): d/da = (b - c) x g, d/db = (c - a) x g, d/dc = (a - b) x g
    t = tri.triangles
    gf = g_acc[t[:, 0]] + g_acc[t[:, 1]] + g_acc[t[:, 2]]
    v = tri.vertices[t]
    ga = np.cross(v[:, 1] - v[:, 2], gf)
    gb = np.cross(v[:, 2] - v[:, 0], gf)
    gc = np.cross(v[:, 0] - v[:, 1], gf)
    return _scatter(n, idx, np.stack([ga, gb, gc], axis=1).reshape(-1, 3))


def backprop_pixels(tri: TriMesh, cam: Camera, nm: NormalMap, pixel_grads) -> np.ndarray:
    """dL/dv_g (N, 3) given dL/d(pixel normal) for every pixel (H, W, 3).

    The chain runs pixel normal -> unnormalized blend -> barycentrics ->
    screen coordinates and camera depths -> camera space -> world, plus the
    path through the area-weighted vertex normals.
    """
    if nm.tri_index is None:
        raise ValueError("normal map has no fragment provenance")
    n = tri.n_vertices
    g_pix = np.asarray(pixel_grads, dtype=np.float64)
    rows, cols = np.nonzero(nm.mask)
    if len(rows) == 0:
        return np.zeros((n, 3))
    g_pix = g_pix[rows, cols]

    vn = vertex_normals(tri)
    vc, xs, ys, _, zc = screen_vertices(tri, cam)
    fid = nm.tri_index[rows, cols]
    ft = tri.triangles[fid]
    al = pixel_alphas(xs, ys, zc, ft, rows, cols)
    nv = vn[ft]  # (P, 3, 3)
    s = np.einsum("pk,pkc->pc", al, nv)
    snorm = np.linalg.norm(s, axis=1)
    shat = s / snorm[:, None]
    g_world = g_pix @ cam.R  # R^T g
    g_s = (g_world - shat * np.einsum("pc,pc->p", shat, g_world)[:, None]) / snorm[:, None]
    g_al = np.einsum("pkc,pc->pk", nv, g_s)
    g_vn = al[:, :, None] * g_s[:, None, :]

    a, b, c = ft[:, 0], ft[:, 1], ft[:, 2]
    px, py = cols + 0.5, rows + 0.5
    xa, ya, xb, yb, xc, yc = xs[a], ys[a], xs[b], ys[b], xs[c], ys[c]
    za, zb, zcc = zc[a], zc[b], zc[c]

    def area(ax, ay, bx, by, cx, cy):
        return -0.5 * ((bx - ax) * (cy - ay) - (by - ay) * (cx - ax))

    A1 = area(px, py, xb, yb, xc, yc)
    A2 = area(xa, ya, px, py, xc, yc)
    A3 = area(xa, ya, xb, yb, px, py)
    g1, g2, g3 = g_al[:, 0], g_al[:, 1], g_al[:, 2]

    gx = np.zeros((len(rows), 3))  # per local vertex: d/dx'
    gy = np.zeros((len(rows), 3))
    gz = np.zeros((len(rows), 3))  # d/dz_c

    # alpha1 = zb zc A(p, b, c)
    _, _, dbx, dby, dcx, dcy = _darea(px, py, xb, yb, xc, yc)
    k = g1 * zb * zcc
    gx[:, 1] += k * dbx
    gy[:, 1] += k * dby
    gx[:, 2] += k * dcx
    gy[:, 2] += k * dcy
    gz[:, 1] += g1 * zcc * A1
    gz[:, 2] += g1 * zb * A1
    # alpha2 = za zc A(a, p, c)
    dax, day, _, _, dcx, dcy = _darea(xa, ya, px, py, xc, yc)
    k = g2 * za * zcc
    gx[:, 0] += k * dax
    gy[:, 0] += k * day
    gx[:, 2] += k * dcx
    gy[:, 2] += k * dcy
    gz[:, 0] += g2 * zcc * A2
    gz[:, 2] += g2 * za * A2
    # alpha3 = za zb A(a, b, p)
    dax, day, dbx, dby, _, _ = _darea(xa, ya, xb, yb, px, py)
    k = g3 * za * zb
    gx[:, 0] += k * dax
    gy[:, 0] += k * day
    gx[:, 1] += k * dbx
    gy[:, 1] += k * dby
    gz[:, 0] += g3 * zb * A3
    gz[:, 1] += g3 * za * A3

    # screen -> camera: x' = -fx x_c / z_c + W/2, y' = -fy y_c / z_c + H/2
    fx, fy = cam.focal
    vcf = vc[ft]  # (P, 3, 3)
    zf = vcf[:, :, 2]
    g_cam = np.empty((len(rows), 3, 3))
    g_cam[:, :, 0] = -fx * gx / zf
    g_cam[:, :, 1] = -fy * gy / zf
    g_cam[:, :, 2] = gz + (fx * vcf[:, :, 0] * gx + fy * vcf[:, :, 1] * gy) / zf ** 2
    g_geo = g_cam @ cam.R  # camera -> world, R^T per vector

    grad = _scatter(n, ft.ravel(), g_geo.reshape(-1, 3))
    g_vn_acc = _scatter(n, ft.ravel(), g_vn.reshape(-1, 3))
    return grad + vertex_normals_vjp(tri, g_vn_acc)
