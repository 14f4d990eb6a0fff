"""Pure-numpy fallback for the compiled sampling kernel."""
from __future__ import annotations

import numpy as np


def warp_affine(src, out_h, out_w, a00, a01, b0, a10, a11, b1, clamp, fill):
    src = np.ascontiguousarray(src, dtype=np.float64)
    h, w, nc = src.shape
    fi = np.arange(out_h, dtype=np.float64)[:, None]
    fj = np.arange(out_w, dtype=np.float64)[None, :]
    sy = a00 * fi + a01 * fj + b0
    sx = a10 * fi + a11 * fj + b1

    if clamp:
        sy = np.clip(sy, 0.0, h - 1.0)
        sx = np.clip(sx, 0.0, w - 1.0)
        outside = np.zeros(sy.shape, dtype=bool)
    else:
        outside = (sy <= -1.0) | (sy >= h) | (sx <= -1.0) | (sx >= w)
        sy = np.where(outside, 0.0, sy)
        sx = np.where(outside, 0.0, sx)

    y0f = np.floor(sy)
    x0f = np.floor(sx)
    fy = (sy - y0f)[..., None]
    fx = (sx - x0f)[..., None]
    y0 = y0f.astype(np.intp)
    x0 = x0f.astype(np.intp)
    y1 = y0 + 1
    x1 = x0 + 1
    if clamp:
        np.minimum(y1, h - 1, out=y1)
        np.minimum(x1, w - 1, out=x1)

    # one-pixel fill border so out-of-frame neighbours read the fill value
    padded = np.full((h + 2, w + 2, nc), fill, dtype=np.float64)
    padded[1:-1, 1:-1] = src

    def pick(y, x):
        return padded[np.clip(y + 1, 0, h + 1), np.clip(x + 1, 0, w + 1)]

    v00 = pick(y0, x0)
    v01 = pick(y0, x1)
    v10 = pick(y1, x0)
    v11 = pick(y1, x1)
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    out = top + fy * (bot - top)
    out[outside] = fill
    return out
