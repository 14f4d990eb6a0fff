"""Sampling kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports; setting
``CXR_EF_PURE_PYTHON=1`` forces the fallback.  ``BACKEND`` names the
active one.

All warps map an output pixel ``(i, j)`` to a source location::

    sy = a00 * i + a01 * j + b0
    sx = a10 * i + a11 * j + b1

and sample it bilinearly.  In clamp mode the location is clamped to the
image (edge replication, the resize convention); otherwise neighbours
outside the image read ``fill``.
"""
from __future__ import annotations

import math
import os

import numpy as np

from . import _kernels_py

_impl = _kernels_py
BACKEND = "python"

if os.environ.get("CXR_EF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels_c
    except ImportError:
        pass
    else:
        _impl = _kernels_c
        BACKEND = "cython"


def warp_affine(src, out_shape, matrix, *, clamp=False, fill=0.0, backend=None):
    """Resample ``src`` (H, W, C) through a 2x3 output-to-source matrix."""
    impl = _impl
    if backend == "python":
        impl = _kernels_py
    elif backend == "cython":
        from . import _kernels_c as impl
    elif backend is not None:
        raise ValueError(f"unknown backend {backend!r}")

    src = np.ascontiguousarray(src, dtype=np.float64)
    if src.ndim != 3:
        raise ValueError(f"expected an (H, W, C) array, got shape {src.shape}")
    (a00, a01, b0), (a10, a11, b1) = np.asarray(matrix, dtype=np.float64)
    out_h, out_w = (int(v) for v in out_shape)
    return np.asarray(
        impl.warp_affine(src, out_h, out_w, float(a00), float(a01), float(b0),
                         float(a10), float(a11), float(b1), bool(clamp), float(fill))
    )


def resize_matrix(src_shape, out_shape, box=None):
    """Matrix for a half-pixel-centred bilinear resize of ``box`` to ``out_shape``.

    ``box`` is ``(top, left, height, width)`` in source pixels (real-valued);
    the default is the whole image.
    """
    out_h, out_w = out_shape
    if box is None:
        box = (0.0, 0.0, float(src_shape[0]), float(src_shape[1]))
    top, left, bh, bw = box
    sy = bh / out_h
    sx = bw / out_w
    return ((sy, 0.0, 0.5 * sy - 0.5 + top), (0.0, sx, 0.5 * sx - 0.5 + left))


def rotation_matrix(shape, angle_deg):
    """Matrix rotating content by ``angle_deg`` about the image centre.

    Positive angles turn the content counter-clockwise as displayed
    (row axis pointing down).
    """
    h, w = shape[:2]
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    theta = math.radians(angle_deg)
    c = math.cos(theta)
    s = math.sin(theta)
    return ((c, s, cy - c * cy - s * cx), (-s, c, cx + s * cy - c * cx))


def resize_bilinear(src, out_shape, *, backend=None):
    """Bilinear resize with the half-pixel convention and edge clamping."""
    src = np.asarray(src, dtype=np.float64)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[:, :, None]
    out = warp_affine(src, out_shape, resize_matrix(src.shape, out_shape),
                      clamp=True, backend=backend)
    return out[:, :, 0] if squeeze else out
