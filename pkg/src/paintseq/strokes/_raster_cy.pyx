# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled rasterization kernels.

Pixel coverage and the alpha-over blend use the same expression order as
_raster_np.py so canvases match the fallback bitwise.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def blend_stroke(
    double[:, :, ::1] canvas,
    double[::1] sx,
    double[::1] sy,
    double[::1] sr,
    double[::1] color,
    double alpha,
    Py_ssize_t y0,
    Py_ssize_t y1,
    Py_ssize_t x0,
    Py_ssize_t x1,
):
    cdef Py_ssize_t res = canvas.shape[0]
    cdef Py_ssize_t m = sx.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double px, py, dx, dy, d2, keep
    cdef double c0 = color[0], c1 = color[1], c2 = color[2]
    cdef bint covered

    keep = 1.0 - alpha
    for i in range(y0, y1):
        py = (<double> i + 0.5) / <double> res
        for j in range(x0, x1):
            px = (<double> j + 0.5) / <double> res
            covered = False
            for k in range(m):
                dx = px - sx[k]
                dy = py - sy[k]
                d2 = dx * dx + dy * dy
                if d2 <= sr[k] * sr[k]:
                    covered = True
                    break
            if covered:
                canvas[i, j, 0] = keep * canvas[i, j, 0] + alpha * c0
                canvas[i, j, 1] = keep * canvas[i, j, 1] + alpha * c1
                canvas[i, j, 2] = keep * canvas[i, j, 2] + alpha * c2


def stroke_sse_delta(
    double[:, :, ::1] canvas,
    double[:, :, ::1] target,
    double[::1] sx,
    double[::1] sy,
    double[::1] sr,
    double[::1] color,
    double alpha,
    Py_ssize_t y0,
    Py_ssize_t y1,
    Py_ssize_t x0,
    Py_ssize_t x1,
):
    cdef Py_ssize_t res = canvas.shape[0]
    cdef Py_ssize_t m = sx.shape[0]
    cdef Py_ssize_t i, j, k, ch
    cdef double px, py, dx, dy, d2, keep, newv, oldv, tv, acc
    cdef double c[3]
    cdef bint covered

    c[0] = color[0]
    c[1] = color[1]
    c[2] = color[2]
    keep = 1.0 - alpha
    acc = 0.0
    for i in range(y0, y1):
        py = (<double> i + 0.5) / <double> res
        for j in range(x0, x1):
            px = (<double> j + 0.5) / <double> res
            covered = False
            for k in range(m):
                dx = px - sx[k]
                dy = py - sy[k]
                d2 = dx * dx + dy * dy
                if d2 <= sr[k] * sr[k]:
                    covered = True
                    break
            if covered:
                for ch in range(3):
                    oldv = canvas[i, j, ch]
                    tv = target[i, j, ch]
                    newv = keep * oldv + alpha * c[ch]
                    acc += (newv - tv) * (newv - tv) - (oldv - tv) * (oldv - tv)
    return acc
