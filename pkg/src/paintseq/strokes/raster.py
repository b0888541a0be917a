"""Stroke rasterization: quadratic Bezier swept disc, alpha-over compositing.

The geometry (curve sampling, bounding box) is computed here once per stroke;
the per-pixel coverage/blend inner loop is dispatched to the compiled Cython
kernel when the extension is importable and to a vectorized NumPy fallback
otherwise. Both backends consume identical sample arrays and use the same
arithmetic expression order, so their outputs are bitwise identical.

Set PAINTSEQ_RASTER_BACKEND=numpy|compiled to force a backend.
"""

import os

import numpy as np

from . import _raster_np
from .types import Canvas, StrokeSpec, validate_canvas

try:
    from . import _raster_cy  # compiled extension

    _HAVE_CY = True
except ImportError:
    _raster_cy = None
    _HAVE_CY = False


def _select_backend():
    forced = os.environ.get("PAINTSEQ_RASTER_BACKEND", "").strip().lower()
    if forced == "numpy":
        return "numpy", _raster_np
    if forced == "compiled":
        if not _HAVE_CY:
            raise ImportError(
                "PAINTSEQ_RASTER_BACKEND=compiled but paintseq.strokes._raster_cy "
                "is not built; install the package (pip install -e .) to compile it"
            )
        return "compiled", _raster_cy
    if forced:
        raise ValueError(f"unknown PAINTSEQ_RASTER_BACKEND={forced!r}")
    if _HAVE_CY:
        return "compiled", _raster_cy
    return "numpy", _raster_np


RASTER_BACKEND, _backend = _select_backend()

# Curve-sampling density: at most this many pixels between consecutive
# disc centers, so the swept union has no gaps at any radius.
_SAMPLE_SPACING_PX = 0.3
_MIN_SAMPLES = 8
_MAX_SAMPLES = 512


def _bezier_points(stroke: StrokeSpec, t: np.ndarray):
    p0 = np.asarray(stroke.p0, dtype=np.float64)
    p1 = np.asarray(stroke.p1, dtype=np.float64)
    p2 = np.asarray(stroke.p2, dtype=np.float64)
    u = 1.0 - t
    x = u * u * p0[0] + 2.0 * u * t * p1[0] + t * t * p2[0]
    y = u * u * p0[1] + 2.0 * u * t * p1[1] + t * t * p2[1]
    return x, y


def stroke_geometry(stroke: StrokeSpec, resolution: int):
    """Sample the stroke into disc centers/radii plus a pixel bounding box.

    Returns (sx, sy, sr, y0, y1, x0, x1) with the box end-exclusive and
    clamped to the canvas; the box may be empty for off-canvas strokes.
    """
    # Arc length estimate from a coarse polyline.
    t_est = np.arange(17, dtype=np.float64) / 16.0
    ex, ey = _bezier_points(stroke, t_est)
    arc = float(np.sum(np.sqrt(np.square(np.diff(ex)) + np.square(np.diff(ey)))))

    spacing = max(_SAMPLE_SPACING_PX / resolution, 0.25 * min(stroke.r0, stroke.r1))
    m = int(np.ceil(arc / spacing)) + 1
    m = max(_MIN_SAMPLES, min(_MAX_SAMPLES, m))

    t = np.arange(m, dtype=np.float64) / (m - 1)
    sx, sy = _bezier_points(stroke, t)
    sr = stroke.r0 + (stroke.r1 - stroke.r0) * t

    rmax = float(sr.max())
    x0 = max(0, int(np.floor((sx.min() - rmax) * resolution)) - 1)
    x1 = min(resolution, int(np.ceil((sx.max() + rmax) * resolution)) + 1)
    y0 = max(0, int(np.floor((sy.min() - rmax) * resolution)) - 1)
    y1 = min(resolution, int(np.ceil((sy.max() + rmax) * resolution)) + 1)
    return sx, sy, sr, y0, y1, x0, x1


def rasterize_stroke(stroke: StrokeSpec, canvas: Canvas) -> Canvas:
    """Alpha-over composite one stroke onto a copy of `canvas`.

    Pure function: the input canvas is never modified, and identical inputs
    produce bitwise-identical outputs regardless of the active backend.
    """
    stroke.validate()
    validate_canvas(canvas)
    out = np.ascontiguousarray(canvas, dtype=np.float64).copy()
    apply_stroke_inplace(stroke, out)
    return out


def apply_stroke_inplace(stroke: StrokeSpec, canvas: Canvas, geometry=None) -> None:
    """In-place variant used by the fitter's hot loop. No validation.

    Pass a precomputed `stroke_geometry` result to skip resampling the curve.
    """
    res = canvas.shape[0]
    sx, sy, sr, y0, y1, x0, x1 = geometry if geometry is not None else stroke_geometry(stroke, res)
    if y0 >= y1 or x0 >= x1:
        return
    color = np.asarray(stroke.color, dtype=np.float64)
    _backend.blend_stroke(canvas, sx, sy, sr, color, float(stroke.alpha), y0, y1, x0, x1)


def stroke_sse_delta(stroke: StrokeSpec, canvas: Canvas, target: Canvas) -> float:
    """Change in sum-squared-error against `target` if `stroke` were applied.

    Negative values mean the stroke is an improvement. Neither array is
    modified; only the stroke's bounding box is visited.
    """
    res = canvas.shape[0]
    sx, sy, sr, y0, y1, x0, x1 = stroke_geometry(stroke, res)
    if y0 >= y1 or x0 >= x1:
        return 0.0
    color = np.asarray(stroke.color, dtype=np.float64)
    return float(
        _backend.stroke_sse_delta(
            canvas, target, sx, sy, sr, color, float(stroke.alpha), y0, y1, x0, x1
        )
    )
