"""8-bit RGB normal-map PNGs and 16-bit depth PNGs.

Normal encoding is ``round_half_up(255 * (n + 1) / 2)`` per channel with
uncovered pixels written as black. Depth PNGs map NDC depth [0, 1] to
[0, 65535]; uncovered pixels are written as 65535.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .raster import NormalMap


def encode_normals(nm: NormalMap) -> np.ndarray:
    rgb = np.floor(255.0 * (nm.normals + 1.0) / 2.0 + 0.5)
    rgb = np.clip(rgb, 0, 255).astype(np.uint8)
    rgb[~nm.mask] = 0
    return rgb


def decode_normals(rgb) -> NormalMap:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] < 3:
        raise ValueError("expected an 8-bit RGB image")
    rgb = rgb[..., :3]
    mask = np.any(rgb != 0, axis=2)
    n = rgb.astype(np.float64) * (2.0 / 255.0) - 1.0
    norm = np.linalg.norm(n, axis=2)
    mask &= norm > 0
    normals = np.zeros_like(n)
    normals[mask] = n[mask] / norm[mask, None]
    H, W = mask.shape
    depth = np.full((H, W), np.inf)
    return NormalMap(normals, mask, depth, None, None)


def encode_png(nm: NormalMap, path) -> None:
    Image.fromarray(encode_normals(nm), mode="RGB").save(path)


def decode_png(path) -> NormalMap:
    img = Image.open(path)
    if img.mode not in ("RGB", "RGBA"):
        raise ValueError(f"{path}: expected an 8-bit RGB PNG, got mode {img.mode}")
    return decode_normals(np.asarray(img.convert("RGB")))


def encode_depth(nm: NormalMap) -> np.ndarray:
    d = np.where(nm.mask, nm.depth, 1.0)
    return np.floor(np.clip(d, 0.0, 1.0) * 65535.0 + 0.5).astype(np.uint16)


def write_depth_png(nm: NormalMap, path) -> None:
    Image.fromarray(encode_depth(nm)).save(path)


def read_depth_png(path, mask=None) -> np.ndarray:
    """NDC depth from a 16-bit PNG; pixels outside ``mask`` become inf."""
    d = np.asarray(Image.open(path)).astype(np.float64) / 65535.0
    if mask is not None:
        d = np.where(mask, d, np.inf)
    return d


def load_target(normal_png, depth_png=None) -> NormalMap:
    nm = decode_png(normal_png)
    if depth_png is not None:
        nm.depth = read_depth_png(depth_png, nm.mask)
    return nm
