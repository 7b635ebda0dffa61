"""Channel conditioning applied before the network.

Inputs are pre-cropped, spatially registered face images; no detection
or alignment happens here. Depth-like rasters come in as non-negative
sensor units with zero marking invalid pixels.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError

# MAD below this is treated as degenerate (constant valid region).
_MAD_FLOOR = 1e-9


def mad_normalize(depth: np.ndarray, k: float = 3.0) -> np.ndarray:
    """Robust depth-to-8-bit mapping via median absolute deviation.

    Over the valid (nonzero) pixels, the window [m - k*MAD, m + k*MAD]
    around the median m is mapped linearly onto [0, 255] with clipping,
    then quantized (half up) to the 8-bit grid and returned as k/255
    floats. Invalid pixels stay 0. A degenerate MAD (constant region)
    maps every valid pixel to mid-gray 128/255.
    """
    arr = np.asarray(depth, dtype=np.float64)
    valid = arr != 0
    if not valid.any():
        raise DataError("no valid depth pixels")
    vals = arr[valid]
    m = float(np.median(vals))
    mad = float(np.median(np.abs(vals - m)))
    out = np.zeros(arr.shape, dtype=np.float64)
    if mad < _MAD_FLOOR:
        out[valid] = 128.0 / 255.0
        return out
    lo = m - k * mad
    hi = m + k * mad
    scaled = (vals - lo) / (hi - lo) * 255.0
    quantized = np.floor(np.clip(scaled, 0.0, 255.0) + 0.5)
    out[valid] = np.clip(quantized, 0.0, 255.0) / 255.0
    return out


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize.

    Convention (fixed): the output grid is anchored at the top-left
    corner and sampled at source coordinates i * in_size / out_size,
    clamped to the valid range. Identity sizes reproduce the input
    bit-exactly and constants are preserved.

    Accepts (H, W) or (H, W, C) arrays.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("target dims must be positive")
    arr = np.asarray(img, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected 2-D or 3-D image, got shape {arr.shape}")
    in_h, in_w, _ = arr.shape

    def axis_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = np.arange(n_out, dtype=np.float64) * (n_in / n_out)
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    ylo, yhi, yf = axis_coords(out_h, in_h)
    xlo, xhi, xf = axis_coords(out_w, in_w)

    rows = arr[ylo] * (1.0 - yf)[:, None, None] + arr[yhi] * yf[:, None, None]
    out = (
        rows[:, xlo] * (1.0 - xf)[None, :, None]
        + rows[:, xhi] * xf[None, :, None]
    )
    return out[:, :, 0] if squeeze else out
