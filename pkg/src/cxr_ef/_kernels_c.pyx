# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled bilinear sampling kernel.

Must stay numerically in lockstep with ``_kernels_py.warp_affine``: same
coordinate formula, same lerp order.
"""
import numpy as np

from libc.math cimport floor


cdef inline double _pick(const double[:, :, ::1] src, Py_ssize_t y, Py_ssize_t x,
                         Py_ssize_t c, Py_ssize_t h, Py_ssize_t w, double fill) noexcept nogil:
    if y < 0 or y >= h or x < 0 or x >= w:
        return fill
    return src[y, x, c]


def warp_affine(const double[:, :, ::1] src, Py_ssize_t out_h, Py_ssize_t out_w,
                double a00, double a01, double b0,
                double a10, double a11, double b1,
                bint clamp, double fill):
    cdef Py_ssize_t h = src.shape[0]
    cdef Py_ssize_t w = src.shape[1]
    cdef Py_ssize_t nc = src.shape[2]
    out = np.empty((out_h, out_w, nc), dtype=np.float64)
    cdef double[:, :, ::1] dst = out
    cdef Py_ssize_t i, j, c, y0, x0, y1, x1
    cdef double sy, sx, fy, fx, v00, v01, v10, v11, top, bot
    cdef double fi, fj
    cdef double ymax = <double>(h - 1)
    cdef double xmax = <double>(w - 1)

    with nogil:
        for i in range(out_h):
            fi = <double>i
            for j in range(out_w):
                fj = <double>j
                sy = a00 * fi + a01 * fj + b0
                sx = a10 * fi + a11 * fj + b1
                if clamp:
                    if sy < 0.0:
                        sy = 0.0
                    elif sy > ymax:
                        sy = ymax
                    if sx < 0.0:
                        sx = 0.0
                    elif sx > xmax:
                        sx = xmax
                elif sy <= -1.0 or sy >= h or sx <= -1.0 or sx >= w:
                    for c in range(nc):
                        dst[i, j, c] = fill
                    continue
                y0 = <Py_ssize_t>floor(sy)
                x0 = <Py_ssize_t>floor(sx)
                fy = sy - y0
                fx = sx - x0
                y1 = y0 + 1
                x1 = x0 + 1
                if clamp:
                    if y1 > h - 1:
                        y1 = h - 1
                    if x1 > w - 1:
                        x1 = w - 1
                for c in range(nc):
                    v00 = _pick(src, y0, x0, c, h, w, fill)
                    v01 = _pick(src, y0, x1, c, h, w, fill)
                    v10 = _pick(src, y1, x0, c, h, w, fill)
                    v11 = _pick(src, y1, x1, c, h, w, fill)
                    top = v00 + fx * (v01 - v00)
                    bot = v10 + fx * (v11 - v10)
                    dst[i, j, c] = top + fy * (bot - top)
    return out
