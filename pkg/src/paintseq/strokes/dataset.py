"""Dataset synthesis: many painting sequences written as PNG frames.

Layout on disk:

    out_dir/
      manifest.json            one record per sequence
      seq_000000/frame_0.png   8-bit RGB keyframes, f per sequence
      seq_000001/...

Manifest records carry {id, caption, strategy, seed, resolution, f}. Every
sequence is generated from a seed derived from the dataset seed and its id,
so records are reproducible in isolation and the whole run is deterministic.
"""

import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..util import derive_seed, np_rng
from .fitter import CoarseToFineSchedule, greedy_fit_strokes
from .keyframes import sample_keyframes
from .scenes import make_caption, random_scene
from .strategies import depth_order_paint, raster_order_paint
from .types import STRATEGIES, Canvas, PaintingSequence, validate_canvas

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"

_MAX_MONOTONE_RETRIES = 20


@dataclass
class DatasetManifest:
    """In-memory view of manifest.json plus the directory it lives in."""

    out_dir: Path
    records: list

    def __len__(self) -> int:
        return len(self.records)

    def save(self) -> Path:
        path = Path(self.out_dir) / MANIFEST_NAME
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.records, fh, indent=2)
            fh.write("\n")
        return path


def canvas_to_uint8(canvas: Canvas) -> np.ndarray:
    return np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)


def uint8_to_canvas(pixels: np.ndarray) -> Canvas:
    return pixels.astype(np.float64) / 255.0


def quantize_canvas(canvas: Canvas) -> Canvas:
    """Round-trip a canvas through 8-bit storage precision."""
    return uint8_to_canvas(canvas_to_uint8(canvas))


def write_frame_png(canvas: Canvas, path: Path) -> None:
    Image.fromarray(canvas_to_uint8(canvas), mode="RGB").save(path, format="PNG")


def read_frame_png(path: Path) -> Canvas:
    with Image.open(path) as img:
        return uint8_to_canvas(np.asarray(img.convert("RGB")))


def sequence_dir(out_dir: Path, seq_id: int) -> Path:
    return Path(out_dir) / f"seq_{seq_id:06d}"


def completion_curve(frames: list) -> np.ndarray:
    """MSE of each frame against the final frame."""
    final = frames[-1]
    return np.array([float(np.square(fr - final).mean()) for fr in frames])


def is_monotone_completion(frames: list, tol: float = 1e-12) -> bool:
    curve = completion_curve(frames)
    return bool(np.all(np.diff(curve) <= tol))


def _raster_tiles_for(resolution: int, f: int) -> int:
    for side in range(2, resolution + 1):
        if resolution % side == 0 and side * side >= f:
            return side * side
    raise ValueError(f"no tile grid for resolution {resolution} with f {f}")


def _fit_stroke_budget(resolution: int) -> int:
    return max(80, resolution * resolution // 28)


def generate_sequence(
    strategy: str,
    resolution: int,
    f: int,
    seed: int,
    gamma: float = 2.0,
    n_strokes: int = None,
) -> PaintingSequence:
    """Build a single keyframed painting sequence for one strategy.

    Pure given its arguments; every random choice flows from `seed`. The
    coarse-to-fine strategy can produce keyframe sets whose distance to the
    final frame dips non-monotonically, so those are rejected and resampled
    with a derived seed until the monotone completion property holds.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    for attempt in range(_MAX_MONOTONE_RETRIES):
        attempt_seed = seed if attempt == 0 else derive_seed(seed, "retry", attempt)
        rng = np_rng(derive_seed(attempt_seed, "scene"))
        if strategy == "depth_order":
            n_objects = (f - 1) + int(rng.integers(0, 3))
        else:
            n_objects = int(rng.integers(2, 5))
        scene = random_scene(resolution, n_objects, derive_seed(attempt_seed, "layout"))
        target = scene.composite()

        if strategy == "coarse_to_fine":
            budget = n_strokes or _fit_stroke_budget(resolution)
            fit = greedy_fit_strokes(
                target, budget, CoarseToFineSchedule(),
                seed=derive_seed(attempt_seed, "fit"),
            )
            full = fit.frames
        elif strategy == "raster_order":
            full = raster_order_paint(target, _raster_tiles_for(resolution, f))
        else:
            full = depth_order_paint(scene)

        if len(full) < f:
            logger.debug("seed %d attempt %d: sequence too short (%d < %d)",
                         seed, attempt, len(full), f)
            continue
        caption = make_caption(strategy, scene.description)
        seq = sample_keyframes(full, f, gamma=gamma, caption=caption,
                               strategy=strategy, seed=seed)
        if is_monotone_completion(seq.frames):
            return seq
        logger.debug("seed %d attempt %d: completion not monotone, resampling",
                     seed, attempt)
    raise RuntimeError(
        f"no monotone {strategy} sequence after {_MAX_MONOTONE_RETRIES} attempts")


def _normalized_mix(strategy_mix: dict) -> tuple:
    if not strategy_mix:
        raise ValueError("strategy_mix is empty")
    names, weights = [], []
    for name in sorted(strategy_mix):
        if name not in STRATEGIES:
            raise ValueError(f"unknown strategy {name!r} in mix")
        w = float(strategy_mix[name])
        if w < 0:
            raise ValueError("strategy weights must be non-negative")
        if w > 0:
            names.append(name)
            weights.append(w)
    if not names:
        raise ValueError("strategy_mix has no positive weight")
    total = sum(weights)
    return names, [w / total for w in weights]


def generate_dataset(
    n: int,
    strategy_mix: dict,
    resolution: int,
    f: int,
    seed: int,
    out_dir,
    gamma: float = 2.0,
) -> DatasetManifest:
    """Generate n sequences and write them plus manifest.json under out_dir.

    A sequence that fails mid-write is deleted before the error propagates,
    so the directory never holds frames without a manifest entry that a
    rerun would not reproduce.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    names, weights = _normalized_mix(strategy_mix)
    picker = np_rng(derive_seed(seed, "mix"))
    records = []
    for seq_id in range(n):
        strategy = str(picker.choice(names, p=weights))
        seq_seed = derive_seed(seed, "seq", seq_id)
        seq = generate_sequence(strategy, resolution, f, seq_seed, gamma=gamma)
        seq_path = sequence_dir(out_dir, seq_id)
        try:
            seq_path.mkdir(exist_ok=True)
            for k, frame in enumerate(seq.frames):
                write_frame_png(frame, seq_path / f"frame_{k}.png")
        except OSError:
            shutil.rmtree(seq_path, ignore_errors=True)
            raise
        records.append({
            "id": seq_id,
            "caption": seq.caption,
            "strategy": strategy,
            "seed": seq_seed,
            "resolution": resolution,
            "f": f,
        })
    manifest = DatasetManifest(out_dir=out_dir, records=records)
    manifest.save()
    return manifest


def load_manifest(out_dir) -> DatasetManifest:
    out_dir = Path(out_dir)
    path = out_dir / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {out_dir}")
    with open(path, encoding="utf-8") as fh:
        records = json.load(fh)
    return DatasetManifest(out_dir=out_dir, records=records)


def load_sequence(out_dir, record: dict) -> PaintingSequence:
    """Read one manifest record's frames back into a PaintingSequence."""
    seq_path = sequence_dir(out_dir, record["id"])
    frames = []
    for k in range(record["f"]):
        frame = read_frame_png(seq_path / f"frame_{k}.png")
        validate_canvas(frame)
        frames.append(frame)
    return PaintingSequence(
        frames=frames,
        caption=record["caption"],
        strategy=record["strategy"],
        seed=record["seed"],
    )
