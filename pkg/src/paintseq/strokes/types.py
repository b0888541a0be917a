"""Core data types of the stroke synthesis engine.

A canvas is a float64 (H, W, 3) array with every channel in [0, 1];
H == W throughout. Strokes are quadratic Bezier swept discs in
normalized canvas coordinates.
"""

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

Canvas = np.ndarray  # (H, W, 3) float64 in [0, 1]

STRATEGIES = ("coarse_to_fine", "raster_order", "depth_order")

# Standard blank canvas is white paper.
BLANK_VALUE = 1.0


def blank_canvas(resolution: int, value: float = BLANK_VALUE) -> Canvas:
    return np.full((resolution, resolution, 3), float(value), dtype=np.float64)


def validate_canvas(canvas: Canvas) -> None:
    if canvas.ndim != 3 or canvas.shape[2] != 3 or canvas.shape[0] != canvas.shape[1]:
        raise ValueError(f"canvas must be square (H, W, 3), got {canvas.shape}")
    if not np.isfinite(canvas).all():
        raise ValueError("canvas contains non-finite values")
    if canvas.min() < 0.0 or canvas.max() > 1.0:
        raise ValueError("canvas values outside [0, 1]")


@dataclass(frozen=True)
class StrokeSpec:
    """One parametric brush stroke: a quadratic Bezier swept disc.

    Control points live in normalized [0,1]^2 canvas coordinates, radii are
    canvas-fraction units in (0, 0.5], and the stroke is composited alpha-over.
    """

    p0: Tuple[float, float]
    p1: Tuple[float, float]
    p2: Tuple[float, float]
    r0: float
    r1: float
    color: Tuple[float, float, float]
    alpha: float

    def validate(self) -> None:
        for pt in (self.p0, self.p1, self.p2):
            if len(pt) != 2 or not all(np.isfinite(v) for v in pt):
                raise ValueError(f"non-finite control point {pt}")
            if not all(0.0 <= v <= 1.0 for v in pt):
                raise ValueError(f"control point {pt} outside [0,1]^2")
        if not (0.0 < self.r0 <= 0.5 and 0.0 < self.r1 <= 0.5):
            raise ValueError(f"radii must lie in (0, 0.5], got {self.r0}, {self.r1}")
        if not all(0.0 <= c <= 1.0 for c in self.color):
            raise ValueError(f"color {self.color} outside [0,1]^3")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")


@dataclass
class PaintingSequence:
    """f ordered canvas snapshots ending at the completed artwork."""

    frames: list  # list[Canvas], paint order, last frame is the target
    caption: str
    strategy: str
    seed: int

    @property
    def f(self) -> int:
        return len(self.frames)

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not self.frames:
            raise ValueError("sequence has no frames")
        for fr in self.frames:
            validate_canvas(fr)


@dataclass
class SceneObject:
    mask: np.ndarray  # (H, W) bool
    color: Tuple[float, float, float]
    depth: int  # smaller = nearer to the viewer
    shape: str = "disc"
    size: str = "small"
    color_name: str = ""


@dataclass
class LayeredScene:
    """Background plus depth-ordered opaque objects.

    Objects are stored nearest-first with strictly increasing depth; the
    composited target equals the background where no object mask covers a
    pixel and the nearest covering object's color elsewhere.
    """

    background: Canvas
    objects: list = field(default_factory=list)  # list[SceneObject]
    description: str = ""

    def validate(self) -> None:
        validate_canvas(self.background)
        h, w = self.background.shape[:2]
        depths = [o.depth for o in self.objects]
        if any(d2 <= d1 for d1, d2 in zip(depths, depths[1:])):
            raise ValueError(f"object depths must be strictly increasing, got {depths}")
        for o in self.objects:
            if o.mask.shape != (h, w) or o.mask.dtype != bool:
                raise ValueError("object mask must be a bool array of canvas shape")

    def visible_masks(self) -> list:
        """Per-object visibility: mask minus the union of all nearer masks."""
        covered = np.zeros(self.background.shape[:2], dtype=bool)
        out = []
        for obj in self.objects:
            vis = obj.mask & ~covered
            out.append(vis)
            covered |= obj.mask
        return out

    def composite(self) -> Canvas:
        target = self.background.copy()
        for obj, vis in zip(self.objects, self.visible_masks()):
            target[vis] = np.asarray(obj.color, dtype=np.float64)
        return target
