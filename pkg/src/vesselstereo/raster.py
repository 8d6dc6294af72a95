"""Raster containers, lossless image I/O and low-level operators.

Gray images are plain 2-D ``numpy`` arrays of dtype ``uint8`` or ``uint16``;
the bit depth is implied by the dtype. Binary masks are 2-D ``bool`` arrays.
Pixel ``(row, col)`` corresponds to image coordinates ``(y, x)``.
"""
from __future__ import annotations

import io
import math
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage as ndi

from ._io import atomic_write_bytes
from .errors import ParameterError

__all__ = [
    "bit_depth",
    "quantize",
    "read_image",
    "write_image",
    "read_mask",
    "write_mask",
    "clahe",
    "shannon_entropy",
    "local_entropy",
    "largest_component",
    "fill_holes",
    "disk",
    "dilate",
]


def bit_depth(img: np.ndarray) -> int:
    if img.dtype == np.uint8:
        return 8
    if img.dtype == np.uint16:
        return 16
    raise ParameterError(f"unsupported image dtype {img.dtype}; expected uint8 or uint16")


def _check_gray(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ParameterError(f"expected a 2-D gray image, got shape {img.shape}")
    if img.size == 0:
        raise ParameterError("image is empty")
    bit_depth(img)
    return img


def quantize(img: np.ndarray, bins: int) -> np.ndarray:
    """Map intensities onto ``bins`` equal-width histogram bins over the full dtype range."""
    depth = bit_depth(img)
    if bins < 2:
        raise ParameterError(f"bins must be >= 2, got {bins}")
    return ((img.astype(np.int64) * bins) >> depth).astype(np.intp)


# --------------------------------------------------------------------------
# I/O
# --------------------------------------------------------------------------

_FORMATS = {".png": "PNG", ".pgm": "PPM", ".pnm": "PPM"}


def read_image(path) -> np.ndarray:
    """Read a single-channel 8- or 16-bit PNG/PGM file."""
    with Image.open(path) as im:
        mode = im.mode
        arr = np.array(im)
    if mode in ("L", "1"):
        return arr.astype(np.uint8) * (255 if mode == "1" else 1)
    if mode.startswith("I"):
        if arr.min() < 0 or arr.max() > 65535:
            raise ParameterError(f"{path}: sample values outside 16-bit range")
        return arr.astype(np.uint16)
    raise ParameterError(f"{path}: unsupported image mode {mode!r} (gray images only)")


def write_image(path, img: np.ndarray) -> None:
    img = _check_gray(img)
    path = Path(path)
    fmt = _FORMATS.get(path.suffix.lower())
    if fmt is None:
        raise ParameterError(f"unsupported image extension {path.suffix!r}; use .png or .pgm")
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format=fmt)
    atomic_write_bytes(path, buf.getvalue())


def read_mask(path) -> np.ndarray:
    return read_image(path) > 0


def write_mask(path, mask: np.ndarray) -> None:
    write_image(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


# --------------------------------------------------------------------------
# CLAHE
# --------------------------------------------------------------------------


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.round(np.linspace(0, n, tiles + 1)).astype(int)


def _clipped_histogram(hist: np.ndarray, clip_limit: float) -> np.ndarray:
    n = int(hist.sum())
    nbins = hist.size
    min_clip = math.ceil(n / nbins)
    clip = min_clip + round(clip_limit * (n - min_clip))
    h = hist.astype(np.int64)
    for _ in range(256):
        excess = int(np.maximum(h - clip, 0).sum())
        if excess == 0:
            break
        h = np.minimum(h, clip)
        step = excess // nbins
        if step == 0:
            # residual below one count per bin is dropped
            break
        h += step
    return h


def _tile_mapping(hist: np.ndarray, clip_limit: float, top: int) -> np.ndarray:
    h = _clipped_histogram(hist, clip_limit)
    return top * np.cumsum(h) / h.sum()


def clahe(img, tile_grid=(8, 8), clip_limit: float = 0.01, bins: int = 256) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    Each of the ``nx * ny`` tiles gets its own equalization mapping built from
    a clipped histogram; the clipped excess is spread uniformly over all bins
    until less than one count per bin remains. Output pixels blend the
    mappings of the four nearest tile centres bilinearly.

    Args:
        img: uint8 or uint16 image.
        tile_grid: ``(nx, ny)`` tiles along x (columns) and y (rows).
        clip_limit: normalized clip level in ``(0, 1]``. The per-bin clip count
            is ``m + round(clip_limit * (N - m))`` with ``N`` tile pixels and
            ``m = ceil(N / bins)``; ``1`` disables clipping.
        bins: histogram bins.

    Returns:
        Image of the same shape and dtype.
    """
    img = _check_gray(img)
    nx, ny = (int(v) for v in tile_grid)
    h, w = img.shape
    if nx < 1 or ny < 1:
        raise ParameterError(f"tile_grid entries must be >= 1, got {tile_grid}")
    if nx > w or ny > h:
        raise ParameterError(f"tile_grid {tile_grid} exceeds image size {w}x{h}")
    if not 0 < clip_limit <= 1:
        raise ParameterError(f"clip_limit must be in (0, 1], got {clip_limit}")
    if bins < 2:
        raise ParameterError(f"bins must be >= 2, got {bins}")

    top = (1 << bit_depth(img)) - 1
    q = quantize(img, bins)
    xe, ye = _tile_edges(w, nx), _tile_edges(h, ny)
    maps = np.empty((ny, nx, bins))
    for ty in range(ny):
        for tx in range(nx):
            tile = q[ye[ty]:ye[ty + 1], xe[tx]:xe[tx + 1]]
            maps[ty, tx] = _tile_mapping(np.bincount(tile.ravel(), minlength=bins), clip_limit, top)

    cy = (ye[:-1] + ye[1:] - 1) / 2.0
    cx = (xe[:-1] + xe[1:] - 1) / 2.0
    fy = np.interp(np.arange(h), cy, np.arange(ny)) if ny > 1 else np.zeros(h)
    fx = np.interp(np.arange(w), cx, np.arange(nx)) if nx > 1 else np.zeros(w)
    y0 = np.floor(fy).astype(int)
    x0 = np.floor(fx).astype(int)
    y1 = np.minimum(y0 + 1, ny - 1)
    x1 = np.minimum(x0 + 1, nx - 1)
    wy = (fy - y0)[:, None]
    wx = (fx - x0)[None, :]
    Y0, Y1 = y0[:, None], y1[:, None]
    X0, X1 = x0[None, :], x1[None, :]
    out = ((1 - wy) * (1 - wx) * maps[Y0, X0, q]
           + (1 - wy) * wx * maps[Y0, X1, q]
           + wy * (1 - wx) * maps[Y1, X0, q]
           + wy * wx * maps[Y1, X1, q])
    return np.clip(np.rint(out), 0, top).astype(img.dtype)


# --------------------------------------------------------------------------
# Entropy
# --------------------------------------------------------------------------


def shannon_entropy(counts) -> float:
    """Entropy in bits of a histogram given as raw counts."""
    c = np.asarray(counts, dtype=float)
    total = c.sum()
    if total <= 0:
        return 0.0
    p = c[c > 0] / total
    return float(max(0.0, -(p * np.log2(p)).sum()))


def local_entropy(img, mask=None, window: int = 9, bins: int = 64) -> np.ndarray:
    """Per-pixel Shannon entropy (bits) of the windowed intensity histogram.

    Windows at the border see replicated edge pixels. Pixels outside ``mask``
    are reported as 0.
    """
    img = _check_gray(img)
    if window < 3 or window % 2 == 0:
        raise ParameterError(f"window must be odd and >= 3, got {window}")
    if window > min(img.shape):
        raise ParameterError(f"window {window} larger than image {img.shape[1]}x{img.shape[0]}")
    if mask is None:
        mask = np.ones(img.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape:
        raise ParameterError(f"mask shape {mask.shape} does not match image {img.shape}")

    q = quantize(img, bins)
    r = window // 2
    qp = np.pad(q, r, mode="edge")
    area = float(window * window)
    ent = np.zeros(img.shape)
    for b in np.unique(qp):
        ind = np.zeros((qp.shape[0] + 1, qp.shape[1] + 1), dtype=np.int32)
        ind[1:, 1:] = qp == b
        ind = ind.cumsum(0).cumsum(1)
        cnt = ind[window:, window:] - ind[:-window, window:] - ind[window:, :-window] + ind[:-window, :-window]
        p = cnt[cnt > 0] / area
        ent[cnt > 0] -= p * np.log2(p)
    ent = np.maximum(ent, 0.0)
    ent[~mask] = 0.0
    return ent


# --------------------------------------------------------------------------
# Binary morphology
# --------------------------------------------------------------------------


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndi.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndi.generate_binary_structure(2, 2)
    raise ParameterError(f"connectivity must be 4 or 8, got {connectivity}")


def largest_component(mask, connectivity: int = 8) -> np.ndarray:
    """Keep only the largest connected component.

    Equal areas are resolved in favour of the component whose first pixel
    comes earliest in raster order.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndi.label(mask, structure=_structure(connectivity))
    if n == 0:
        return np.zeros_like(mask)
    areas = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(areas)) + 1)


def fill_holes(mask) -> np.ndarray:
    """Fill background regions (4-connected) that do not touch the border."""
    return ndi.binary_fill_holes(np.asarray(mask, dtype=bool))


def disk(radius: float) -> np.ndarray:
    """Disk structuring element: offsets with ``dx**2 + dy**2 <= radius**2``.

    Radius 1 gives the 4-neighbourhood cross, radius 1.5 the full 3x3 square.
    """
    if radius < 0:
        raise ParameterError(f"radius must be >= 0, got {radius}")
    r = int(math.floor(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= radius * radius


def dilate(mask, radius: float) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    se = disk(radius)
    if se.shape == (1, 1):
        return mask.copy()
    return ndi.binary_dilation(mask, structure=se)
