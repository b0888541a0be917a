from .types import Canvas, LayeredScene, PaintingSequence, SceneObject, StrokeSpec, blank_canvas
from .raster import RASTER_BACKEND, rasterize_stroke
from .fitter import CoarseToFineSchedule, greedy_fit_strokes
from .strategies import depth_order_paint, raster_order_paint
from .keyframes import sample_keyframes
from .dataset import DatasetManifest, generate_dataset, load_manifest, load_sequence

__all__ = [
    "Canvas",
    "CoarseToFineSchedule",
    "DatasetManifest",
    "LayeredScene",
    "PaintingSequence",
    "RASTER_BACKEND",
    "SceneObject",
    "StrokeSpec",
    "blank_canvas",
    "depth_order_paint",
    "generate_dataset",
    "greedy_fit_strokes",
    "load_manifest",
    "load_sequence",
    "raster_order_paint",
    "rasterize_stroke",
    "sample_keyframes",
]
