"""Procedural layered scenes and the caption grammar that describes them.

Scenes are stacks of flat-colored shapes over a tinted background. They serve
as paint targets for every sequence strategy, and their descriptions are built
from a small closed vocabulary so the toy text encoder can enumerate it.
"""

import numpy as np

from ..util import np_rng
from .types import LayeredScene, SceneObject, blank_canvas

PALETTE = {
    "red": (0.83, 0.18, 0.16),
    "green": (0.22, 0.62, 0.28),
    "blue": (0.20, 0.38, 0.80),
    "yellow": (0.92, 0.80, 0.22),
    "purple": (0.55, 0.30, 0.70),
    "orange": (0.90, 0.52, 0.18),
    "teal": (0.16, 0.62, 0.60),
    "pink": (0.90, 0.48, 0.62),
}

BACKGROUNDS = {
    "pale": (0.93, 0.91, 0.87),
    "dark": (0.22, 0.22, 0.26),
    "warm": (0.88, 0.80, 0.68),
    "cool": (0.72, 0.78, 0.85),
}

SHAPE_NAMES = ("circle", "square", "triangle", "diamond")

NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six",
                "seven", "eight", "nine", "ten", "eleven", "twelve")

TRIGGERS = {
    "coarse_to_fine": "sksA",
    "raster_order": "sksB",
    "depth_order": "sksC",
}


def shape_mask(shape: str, cx: float, cy: float, r: float, resolution: int) -> np.ndarray:
    """Boolean mask of a named shape, all coordinates in canvas units."""
    coords = (np.arange(resolution) + 0.5) / resolution
    xs = coords[None, :]
    ys = coords[:, None]
    if shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if shape == "square":
        return np.maximum(np.abs(xs - cx), np.abs(ys - cy)) <= r
    if shape == "diamond":
        return np.abs(xs - cx) + np.abs(ys - cy) <= r
    if shape == "triangle":
        inside_y = (ys >= cy - r) & (ys <= cy + r)
        half_width = (ys - (cy - r)) * 0.5
        return inside_y & (np.abs(xs - cx) <= half_width)
    raise ValueError(f"unknown shape {shape!r}")


def scene_description(objects: list, background_name: str) -> str:
    """Readable summary of a scene, in the closed caption vocabulary."""
    def article(word):
        return "an" if word[0] in "aeiou" else "a"

    phrases = [f"{article(o.color_name)} {o.color_name} {o.shape}"
               for o in objects[:3]]
    extra = len(objects) - 3
    if extra > 0:
        word = NUMBER_WORDS[extra] if extra < len(NUMBER_WORDS) else "many"
        phrases.append(f"{word} more {'shape' if extra == 1 else 'shapes'}")
    if len(phrases) == 1:
        listing = phrases[0]
    else:
        listing = ", ".join(phrases[:-1]) + " and " + phrases[-1]
    return f"{listing} on a {background_name} background"


def make_caption(strategy: str, description: str) -> str:
    trigger = TRIGGERS[strategy]
    return f"{trigger} painting process, {description}"


def random_scene(resolution: int, n_objects: int, seed: int) -> LayeredScene:
    """Sample a layered scene with strictly ordered depths.

    Every object keeps at least a sliver of visible area; positions are
    resampled when occlusion would hide one completely.
    """
    if n_objects < 1:
        raise ValueError("need at least one object")
    rng = np_rng(seed)
    bg_name = str(rng.choice(sorted(BACKGROUNDS)))
    background = blank_canvas(resolution, value=0.0)
    background[:] = np.asarray(BACKGROUNDS[bg_name], dtype=np.float64)

    r_lo, r_hi = (0.10, 0.22) if n_objects <= 3 else (0.07, 0.15)
    min_visible = max(4, int(0.001 * resolution * resolution))
    objects = []
    occupied = np.zeros((resolution, resolution), dtype=bool)
    for i in range(n_objects):
        for _ in range(64):
            shape = str(rng.choice(SHAPE_NAMES))
            color_name = str(rng.choice(sorted(PALETTE)))
            r = float(rng.uniform(r_lo, r_hi))
            cx = float(rng.uniform(r, 1.0 - r))
            cy = float(rng.uniform(r, 1.0 - r))
            mask = shape_mask(shape, cx, cy, r, resolution)
            visible = mask & ~occupied
            if visible.sum() >= min_visible:
                break
        else:
            raise RuntimeError("could not place a visible object")
        objects.append(SceneObject(
            mask=mask,
            color=np.asarray(PALETTE[color_name], dtype=np.float64),
            depth=1.0 + 0.25 * i,
            shape=shape,
            size=r,
            color_name=color_name,
        ))
        occupied |= mask

    description = scene_description(objects, bg_name)
    scene = LayeredScene(background=background, objects=objects, description=description)
    scene.validate()
    return scene
