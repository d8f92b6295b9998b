"""Corner-aligned bilinear resampling on the leading two axes."""

from __future__ import annotations

import numpy as np


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    if n_out < 1 or n_in < 1:
        raise ValueError("resize dimensions must be >= 1")
    if n_in == 1 or n_out == 1:
        # Degenerate axes collapse to the first sample (constant along the axis).
        return np.zeros(n_out, dtype=np.float64)
    return np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (H, W) or (H, W, C) with corner-aligned bilinear sampling.

    Output grid corners map exactly onto input grid corners, so an identity
    resize returns the input values and a constant field stays constant.
    Computes in float64.
    """
    a = np.asarray(arr, dtype=np.float64)
    h, w = a.shape[:2]
    if (out_h, out_w) == (h, w):
        return a.copy()
    ys = _source_coords(out_h, h)
    xs = _source_coords(out_w, w)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).reshape(-1, 1)
    fx = (xs - x0).reshape(1, -1)
    if a.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = a[y0[:, None], x0[None, :]] * (1.0 - fx) + a[y0[:, None], x1[None, :]] * fx
    bottom = a[y1[:, None], x0[None, :]] * (1.0 - fx) + a[y1[:, None], x1[None, :]] * fx
    return top * (1.0 - fy) + bottom * fy
