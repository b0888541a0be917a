"""Pure-NumPy rasterization kernels (fallback for the Cython extension).

Expression order mirrors _raster_cy.pyx exactly so both backends produce
bitwise-identical canvases.
"""

import numpy as np


def _coverage(sx, sy, sr, y0, y1, x0, x1, resolution):
    px = (np.arange(x0, x1, dtype=np.float64) + 0.5) / resolution
    py = (np.arange(y0, y1, dtype=np.float64) + 0.5) / resolution
    dx = px[None, :, None] - sx[None, None, :]
    dy = py[:, None, None] - sy[None, None, :]
    d2 = np.square(dx) + np.square(dy)
    return (d2 <= np.square(sr)[None, None, :]).any(axis=2)


def blend_stroke(canvas, sx, sy, sr, color, alpha, y0, y1, x0, x1):
    res = canvas.shape[0]
    cov = _coverage(sx, sy, sr, y0, y1, x0, x1, res)
    box = canvas[y0:y1, x0:x1]
    box[cov] = (1.0 - alpha) * box[cov] + alpha * color


def stroke_sse_delta(canvas, target, sx, sy, sr, color, alpha, y0, y1, x0, x1):
    res = canvas.shape[0]
    cov = _coverage(sx, sy, sr, y0, y1, x0, x1, res)
    c = canvas[y0:y1, x0:x1][cov]
    t = target[y0:y1, x0:x1][cov]
    new = (1.0 - alpha) * c + alpha * color
    return float(np.sum(np.square(new - t)) - np.sum(np.square(c - t)))
