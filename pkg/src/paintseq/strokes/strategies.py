"""Rule-based painting orders: tile-by-tile raster and depth-layered.

Both strategies build full sequences whose frames only ever move pixels from
the blank canvas value to their final values, so completion is monotone by
construction. The stroke-fitting strategy lives in `fitter`.
"""

import math

import numpy as np

from .types import Canvas, LayeredScene, blank_canvas, validate_canvas


def raster_tile_grid(tiles: int, resolution: int) -> int:
    """Side length of the tile grid; tiles must be a perfect square whose
    side divides the resolution."""
    side = math.isqrt(tiles)
    if side * side != tiles:
        raise ValueError(f"tiles={tiles} is not a perfect square")
    if resolution % side != 0:
        raise ValueError(f"grid side {side} does not divide resolution {resolution}")
    return side


def raster_order_paint(target: Canvas, tiles: int) -> list:
    """Reveal `target` one tile at a time, left to right then top to bottom.

    Returns `tiles` frames; the last one equals the target exactly.
    """
    validate_canvas(target)
    resolution = target.shape[0]
    side = raster_tile_grid(tiles, resolution)
    step = resolution // side
    canvas = blank_canvas(resolution)
    frames = []
    for row in range(side):
        for col in range(side):
            y0, x0 = row * step, col * step
            canvas[y0:y0 + step, x0:x0 + step] = target[y0:y0 + step, x0:x0 + step]
            frames.append(canvas.copy())
    return frames


def depth_order_paint(scene: LayeredScene) -> list:
    """Paint scene objects nearest first, then fill the background.

    Each object contributes only its visible region (the part no nearer
    object covers), so the sequence has len(objects) + 1 frames and the last
    frame equals the scene composite.
    """
    scene.validate()
    resolution = scene.background.shape[0]
    canvas = blank_canvas(resolution)
    frames = []
    covered = np.zeros((resolution, resolution), dtype=bool)
    for obj, visible in zip(scene.objects, scene.visible_masks()):
        canvas[visible] = obj.color
        covered |= visible
        frames.append(canvas.copy())
    canvas[~covered] = scene.background[~covered]
    frames.append(canvas.copy())
    return frames
