"""Greedy stroke fitting: approximate a target image with brush strokes.

The fitter repeatedly proposes candidate strokes, scores each by the exact
change in summed squared error it would cause, and keeps the best one if it
lowers the error. Stroke sizes follow a coarse-to-fine schedule so early
strokes block in large color regions and later ones recover detail.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from ..util import np_rng
from .raster import apply_stroke_inplace, stroke_geometry, stroke_sse_delta
from .types import Canvas, StrokeSpec, blank_canvas, validate_canvas

logger = logging.getLogger(__name__)

_CANDIDATES_PER_STROKE = 32
_REFINEMENTS_PER_STROKE = 16


@dataclass(frozen=True)
class CoarseToFineSchedule:
    """Radius bounds per fitting phase.

    Each phase is (fraction_of_budget, r_min, r_max) with radii in canvas
    units (the canvas spans [0, 1]). Fractions must sum to 1.
    """

    phases: tuple = (
        (0.20, 0.10, 0.28),
        (0.30, 0.04, 0.12),
        (0.50, 0.012, 0.05),
    )

    def validate(self) -> None:
        total = sum(p[0] for p in self.phases)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"phase fractions sum to {total}, expected 1")
        for frac, r_min, r_max in self.phases:
            if not (0 < r_min <= r_max <= 0.5):
                raise ValueError(f"bad radius range ({r_min}, {r_max})")
            if frac <= 0:
                raise ValueError("phase fractions must be positive")

    def bounds_at(self, progress: float) -> tuple:
        """Radius range for a stroke at `progress` in [0, 1) of the budget."""
        acc = 0.0
        for frac, r_min, r_max in self.phases:
            acc += frac
            if progress < acc:
                return r_min, r_max
        return self.phases[-1][1], self.phases[-1][2]


@dataclass
class FitResult:
    """Outcome of a greedy fit: accepted strokes and per-stroke canvases."""

    strokes: list
    frames: list = field(repr=False)
    final_mse: float

    @property
    def n(self) -> int:
        return len(self.strokes)


def _error_map(canvas: Canvas, target: Canvas) -> np.ndarray:
    return np.square(canvas - target).sum(axis=2)


def _sample_centers(rng, error_map: np.ndarray, count: int) -> np.ndarray:
    """Pick pixel indices with probability proportional to current error."""
    flat = error_map.ravel()
    total = flat.sum()
    if total <= 0:
        idx = rng.integers(0, flat.size, size=count)
    else:
        idx = rng.choice(flat.size, size=count, p=flat / total)
    h, w = error_map.shape
    ys, xs = np.divmod(idx, w)
    return np.stack([xs, ys], axis=1), h, w


def _candidate_at(rng, cx: float, cy: float, color, r_min: float, r_max: float) -> StrokeSpec:
    r0 = float(rng.uniform(r_min, r_max))
    r1 = float(np.clip(r0 * rng.uniform(0.4, 1.0), r_min * 0.5, 0.5))
    length = r0 * rng.uniform(1.5, 4.0)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    dx, dy = np.cos(theta) * length * 0.5, np.sin(theta) * length * 0.5
    bend = r0 * rng.normal(0.0, 0.6)
    px, py = -np.sin(theta) * bend, np.cos(theta) * bend
    p0 = (float(np.clip(cx - dx, 0.0, 1.0)), float(np.clip(cy - dy, 0.0, 1.0)))
    p2 = (float(np.clip(cx + dx, 0.0, 1.0)), float(np.clip(cy + dy, 0.0, 1.0)))
    p1 = (float(np.clip(cx + px, 0.0, 1.0)), float(np.clip(cy + py, 0.0, 1.0)))
    jitter = np.clip(np.asarray(color) + rng.normal(0.0, 0.02, size=3), 0.0, 1.0)
    alpha = float(rng.uniform(0.65, 1.0))
    return StrokeSpec(p0=p0, p1=p1, p2=p2, r0=r0, r1=max(r1, 1e-4),
                      color=tuple(float(v) for v in jitter), alpha=alpha)


def _mutate(rng, stroke: StrokeSpec, r_min: float, r_max: float) -> StrokeSpec:
    scale = stroke.r0 * 0.5

    def nudge(pt):
        return (
            float(np.clip(pt[0] + rng.normal(0.0, scale), 0.0, 1.0)),
            float(np.clip(pt[1] + rng.normal(0.0, scale), 0.0, 1.0)),
        )

    r0 = float(np.clip(stroke.r0 * np.exp(rng.normal(0.0, 0.15)), r_min, r_max))
    r1 = float(np.clip(stroke.r1 * np.exp(rng.normal(0.0, 0.15)), r_min * 0.5, 0.5))
    color = tuple(float(v) for v in np.clip(
        np.asarray(stroke.color) + rng.normal(0.0, 0.03, size=3), 0.0, 1.0))
    alpha = float(np.clip(stroke.alpha + rng.normal(0.0, 0.08), 0.3, 1.0))
    return StrokeSpec(p0=nudge(stroke.p0), p1=nudge(stroke.p1), p2=nudge(stroke.p2),
                      r0=r0, r1=max(r1, 1e-4), color=color, alpha=alpha)


def _best_of(candidates, canvas, target):
    best, best_delta = None, 0.0
    for cand in candidates:
        delta = stroke_sse_delta(cand, canvas, target)
        if delta < best_delta:
            best, best_delta = cand, delta
    return best, best_delta


def greedy_fit_strokes(
    target: Canvas,
    n_strokes: int,
    schedule: CoarseToFineSchedule = None,
    seed: int = 0,
    canvas: Canvas = None,
) -> FitResult:
    """Fit up to n_strokes strokes to `target`, greedily minimizing MSE.

    Runs exactly n_strokes proposal rounds. A round whose best candidate
    would raise the error yields no stroke; the miss is logged and fitting
    moves on, so the result may hold fewer strokes than the budget. Each
    accepted stroke contributes one canvas snapshot, and together those form
    the full-length painting sequence.
    """
    validate_canvas(target)
    if n_strokes < 0:
        raise ValueError("n_strokes must be >= 0")
    schedule = schedule or CoarseToFineSchedule()
    schedule.validate()
    rng = np_rng(seed)
    work = blank_canvas(target.shape[0]) if canvas is None else canvas.copy()
    if work.shape != target.shape:
        raise ValueError("canvas and target shapes differ")

    err = _error_map(work, target)
    strokes, frames = [], []
    for round_idx in range(n_strokes):
        r_min, r_max = schedule.bounds_at(round_idx / n_strokes)
        centers, h, w = _sample_centers(rng, err, _CANDIDATES_PER_STROKE)
        candidates = []
        for xpix, ypix in centers:
            cx = (xpix + 0.5) / w
            cy = (ypix + 0.5) / h
            color = target[ypix, xpix]
            candidates.append(_candidate_at(rng, cx, cy, color, r_min, r_max))
        best, best_delta = _best_of(candidates, work, target)
        if best is not None:
            for _ in range(_REFINEMENTS_PER_STROKE):
                mutant = _mutate(rng, best, r_min, r_max)
                delta = stroke_sse_delta(mutant, work, target)
                if delta < best_delta:
                    best, best_delta = mutant, delta
        if best is None:
            logger.debug("round %d: no improving candidate, skipped", round_idx)
            continue
        geo = stroke_geometry(best, work.shape[0])
        apply_stroke_inplace(best, work, geo)
        y0, y1, x0, x1 = geo[3], geo[4], geo[5], geo[6]
        err[y0:y1, x0:x1] = _error_map(work[y0:y1, x0:x1], target[y0:y1, x0:x1])
        strokes.append(best)
        frames.append(work.copy())

    final_mse = float(np.square(work - target).mean())
    return FitResult(strokes=strokes, frames=frames, final_mse=final_mse)
