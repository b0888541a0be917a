"""Metrics and diagnostics for painting sequences.

Covers reconstruction consistency (MSE, L1, a feature-space proxy),
process-shape statistics used to tell painting strategies apart, a small
logistic classifier over those statistics, and GIF/contact-sheet export.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from PIL import Image

from .util import torch_generator

_DIFF_THRESHOLD = 0.1
_CURVE_POINTS = 7


class MetricUnavailableError(RuntimeError):
    """Raised when an optional metric's backing model is absent."""


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def mse(a: np.ndarray, b: np.ndarray) -> float:
    _check_pair(a, b)
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(np.square(d)))


def l1(a: np.ndarray, b: np.ndarray) -> float:
    _check_pair(a, b)
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(np.abs(d)))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity with the standard 11x11 Gaussian window."""
    _check_pair(a, b)
    ta = torch.from_numpy(np.asarray(a, dtype=np.float64)).mean(-1)[None, None]
    tb = torch.from_numpy(np.asarray(b, dtype=np.float64)).mean(-1)[None, None]
    coords = torch.arange(11, dtype=torch.float64) - 5
    g = torch.exp(-coords ** 2 / (2 * 1.5 ** 2))
    g = g / g.sum()
    k = (g[:, None] * g[None, :]).reshape(1, 1, 11, 11)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a, mu_b = F.conv2d(ta, k), F.conv2d(tb, k)
    va = F.conv2d(ta * ta, k) - mu_a ** 2
    vb = F.conv2d(tb * tb, k) - mu_b ** 2
    cov = F.conv2d(ta * tb, k) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))
    return float(s.mean())


class FeatureProbe(nn.Module):
    """Fixed random convolutional feature extractor.

    Stands in for a perceptual network when no learned codec is on hand;
    the weights are seeded, never trained, and shared across comparisons.
    """

    def __init__(self, seed: int = 0):
        super().__init__()
        gen = torch_generator(seed)
        self.conv1 = nn.Conv2d(3, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(32, 16, 3, padding=1)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2, self.conv3):
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) * 0.2)
                conv.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def feature_maps(self, images: torch.Tensor) -> torch.Tensor:
        x = images.to(torch.float32)
        x = F.silu(self.conv1(x))
        x = F.silu(self.conv2(x))
        return self.conv3(x)


def _canvas_batch(canvas: np.ndarray) -> torch.Tensor:
    arr = np.asarray(canvas, dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1)[None]


def perceptual_proxy(a: np.ndarray, b: np.ndarray, extractor=None) -> float:
    """L2 between unit-normalized feature maps of the two images."""
    _check_pair(a, b)
    if extractor is None:
        raise MetricUnavailableError(
            "perceptual proxy needs a feature extractor (learned codec or "
            "FeatureProbe); none was provided")
    with torch.no_grad():
        fa = extractor.feature_maps(_canvas_batch(a)).flatten().to(torch.float64)
        fb = extractor.feature_maps(_canvas_batch(b)).flatten().to(torch.float64)
    na = torch.linalg.norm(fa)
    nb = torch.linalg.norm(fb)
    fa = fa / torch.clamp(na, min=1e-12)
    fb = fb / torch.clamp(nb, min=1e-12)
    return float(torch.linalg.norm(fa - fb))


# ---------------------------------------------------------------------------
# Consistency report


@dataclass
class ConsistencyReport:
    mse_values: list
    l1_values: list
    proxy_values: list  # may be empty when no extractor was available
    fingerprint: str

    @property
    def n(self) -> int:
        return len(self.mse_values)

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mse_values))

    @property
    def mean_l1(self) -> float:
        return float(np.mean(self.l1_values))

    @property
    def mean_proxy(self):
        return float(np.mean(self.proxy_values)) if self.proxy_values else None

    def to_dict(self) -> dict:
        return {
            "samples": self.n,
            "fingerprint": self.fingerprint,
            "per_sample": {
                "mse": self.mse_values,
                "proxy": self.proxy_values or None,
                "l1": self.l1_values,
            },
            "mean": {
                "mse": self.mean_mse,
                "proxy": self.mean_proxy,
                "l1": self.mean_l1,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        rows = []
        header = f"{'sample':>8}  {'MSE':>12}  {'proxy':>12}  {'L1':>12}"
        rows.append(header)
        rows.append("-" * len(header))
        for i in range(self.n):
            proxy = (f"{self.proxy_values[i]:>12.6f}"
                     if self.proxy_values else f"{'-':>12}")
            rows.append(f"{i:>8}  {self.mse_values[i]:>12.6f}  "
                        f"{proxy}  {self.l1_values[i]:>12.6f}")
        rows.append("-" * len(header))
        proxy_mean = (f"{self.mean_proxy:>12.6f}"
                      if self.proxy_values else f"{'-':>12}")
        rows.append(f"{'mean':>8}  {self.mean_mse:>12.6f}  "
                    f"{proxy_mean}  {self.mean_l1:>12.6f}")
        return "\n".join(rows)


def consistency_report(pred_frames, ref_frames, extractor=None) -> ConsistencyReport:
    if len(pred_frames) != len(ref_frames):
        raise ValueError(
            f"frame count mismatch: {len(pred_frames)} vs {len(ref_frames)}")
    if not pred_frames:
        raise ValueError("no frames to compare")
    mses = [mse(p, r) for p, r in zip(pred_frames, ref_frames)]
    l1s = [l1(p, r) for p, r in zip(pred_frames, ref_frames)]
    proxies = []
    if extractor is not None:
        proxies = [perceptual_proxy(p, r, extractor)
                   for p, r in zip(pred_frames, ref_frames)]
    ident = {"samples": len(pred_frames),
             "extractor": type(extractor).__name__ if extractor else "none"}
    fingerprint = hashlib.sha256(
        json.dumps(ident, sort_keys=True).encode()).hexdigest()[:16]
    return ConsistencyReport(mses, l1s, proxies, fingerprint)


# ---------------------------------------------------------------------------
# Process-shape statistics


def _gray(frame: np.ndarray) -> np.ndarray:
    return np.asarray(frame, dtype=np.float64).mean(axis=-1)


def laplacian_energy(frame: np.ndarray) -> float:
    g = _gray(frame)
    lap = (g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:]
           - 4.0 * g[1:-1, 1:-1])
    return float(np.mean(np.square(lap)))


def interior_detail_energy(frame: np.ndarray, blank_value: float = 1.0,
                           threshold: float = 0.1) -> float:
    """Edge energy between painted pixels only.

    The boundary between paint and untouched canvas is excluded, so a
    single large early stroke does not register as detail; color edges
    accumulated inside the painted region do.
    """
    g = _gray(frame)
    arr = np.asarray(frame, dtype=np.float64)
    painted = np.abs(arr - blank_value).max(axis=-1) > threshold
    core = (painted[1:-1, 1:-1] & painted[:-2, 1:-1] & painted[2:, 1:-1]
            & painted[1:-1, :-2] & painted[1:-1, 2:])
    lap = (g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:]
           - 4.0 * g[1:-1, 1:-1])
    sq = np.square(lap)
    return float(sq[core].sum() / sq.size)


def _diff_mask(prev: np.ndarray, cur: np.ndarray) -> np.ndarray:
    delta = np.abs(np.asarray(cur, np.float64) - np.asarray(prev, np.float64))
    return delta.max(axis=-1) > _DIFF_THRESHOLD


@dataclass
class ProcessShapeStats:
    """Per-sequence statistics describing how the painting unfolds."""

    completion: list            # MSE(frame_k, final) per frame
    energy: list                # Laplacian energy per frame
    detail_energy: list         # interior (paint-on-paint) edge energy per frame
    centroid_path: list         # (x, y) centroid of newly changed pixels, or None
    scan_path: list             # flattened raster position of that centroid, or None
    diff_fraction: list         # fraction of pixels changed per step
    diff_locality: list         # changed pixels / bounding-box area per step
    resolution: int

    def feature_vector(self) -> np.ndarray:
        """Bounded feature summary. Every entry lies in [0, 1], so inputs
        far outside the training distribution cannot saturate the model."""
        f = len(self.completion)
        grid = np.linspace(0, f - 1, _CURVE_POINTS)

        def curve(values):
            arr = np.asarray(values, dtype=np.float64)
            return np.interp(grid, np.arange(f), arr / (arr.max() + 1e-12))

        comp = curve(self.completion)
        energy = curve(self.energy)
        detail = curve(self.detail_energy)
        scan = [s for s in self.scan_path if s is not None]
        if len(scan) >= 2:
            scan_monotone = float(np.mean(np.diff(scan) > 0))
        else:
            scan_monotone = 0.0
        ys = [c[1] for c in self.centroid_path if c is not None]
        if len(ys) >= 2:
            y_monotone = float(np.mean(np.diff(ys) > 0))
        else:
            y_monotone = 0.0
        fractions = np.asarray(self.diff_fraction, dtype=np.float64)
        mean_fraction = float(fractions.mean()) if fractions.size else 0.0
        last_share = (float(fractions[-1] / (fractions.sum() + 1e-12))
                      if fractions.size else 0.0)
        locality = [v for v in self.diff_locality if v is not None]
        mean_locality = float(np.mean(locality)) if locality else 0.0
        return np.concatenate([
            comp, energy, detail,
            [scan_monotone, y_monotone, mean_fraction, last_share,
             mean_locality],
        ])


def process_shape_stats(seq) -> ProcessShapeStats:
    frames = seq.frames if hasattr(seq, "frames") else list(seq)
    if len(frames) < 2:
        raise ValueError("need at least 2 frames")
    final = frames[-1]
    resolution = final.shape[0]
    completion = [mse(fr, final) for fr in frames]
    energy = [laplacian_energy(fr) for fr in frames]
    detail_energy = [interior_detail_energy(fr) for fr in frames]
    centroid_path, scan_path, diff_fraction, diff_locality = [], [], [], []
    for prev, cur in zip(frames[:-1], frames[1:]):
        mask = _diff_mask(prev, cur)
        count = int(mask.sum())
        diff_fraction.append(count / mask.size)
        if count == 0:
            centroid_path.append(None)
            scan_path.append(None)
            diff_locality.append(None)
            continue
        ys, xs = np.nonzero(mask)
        cx, cy = float(xs.mean()), float(ys.mean())
        centroid_path.append((cx, cy))
        scan_path.append(cy * resolution + cx)
        bbox = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
        diff_locality.append(count / bbox)
    return ProcessShapeStats(completion, energy, detail_energy, centroid_path,
                             scan_path, diff_fraction, diff_locality, resolution)


# ---------------------------------------------------------------------------
# Strategy classifier


class StrategyClassifier:
    """Logistic model over process-shape features.

    Used as an automatic oracle for whether generated sequences follow a
    given painting strategy. Training adds frame-shuffled copies of the
    inputs under a reject label, so degenerate orderings earn low
    confidence instead of a confidently wrong class.
    """

    _REJECT = "__shuffled__"

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._model = None
        self._labels = None
        self._class_index = None

    @property
    def trained(self) -> bool:
        return self._model is not None

    def fit(self, sequences, labels) -> "StrategyClassifier":
        from sklearn.linear_model import LogisticRegression
        from sklearn.preprocessing import StandardScaler
        from sklearn.pipeline import make_pipeline
        if len(sequences) != len(labels):
            raise ValueError("sequences and labels must align")
        feats = [process_shape_stats(s) for s in sequences]
        X = [st.feature_vector() for st in feats]
        y = list(labels)
        rng = np.random.default_rng(self.seed)
        for s in sequences:
            frames = s.frames if hasattr(s, "frames") else list(s)
            order = rng.permutation(len(frames))
            while np.array_equal(order, np.arange(len(frames))):
                order = rng.permutation(len(frames))
            shuffled = [frames[j] for j in order]
            X.append(process_shape_stats(shuffled).feature_vector())
            y.append(self._REJECT)
        self._model = make_pipeline(
            StandardScaler(),
            LogisticRegression(max_iter=2000, random_state=self.seed))
        self._model.fit(np.stack(X), y)
        classes = list(self._model.classes_)
        self._labels = [c for c in classes if c != self._REJECT]
        self._class_index = {c: classes.index(c) for c in self._labels}
        return self

    def _require_trained(self) -> None:
        if not self.trained:
            raise RuntimeError("classifier has not been fit yet")

    def predict(self, seq) -> str:
        return self.predict_with_confidence(seq)[0]

    def predict_with_confidence(self, seq):
        """Top strategy label and its raw probability.

        The reject class absorbs probability mass for implausible frame
        orderings, which is what makes the confidence informative.
        """
        self._require_trained()
        x = process_shape_stats(seq).feature_vector()[None]
        probs = self._model.predict_proba(x)[0]
        best = max(self._labels, key=lambda c: probs[self._class_index[c]])
        return best, float(probs[self._class_index[best]])

    def accuracy(self, sequences, labels) -> float:
        self._require_trained()
        hits = sum(self.predict(s) == y for s, y in zip(sequences, labels))
        return hits / len(labels)


# ---------------------------------------------------------------------------
# Media export


@dataclass
class GifExport:
    gif_path: str
    sheet_path: str
    per_frame_ms: float
    frames: list = field(repr=False)  # uint8 arrays exactly as encoded


def _to_uint8(frame: np.ndarray) -> np.ndarray:
    arr = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    return (arr * 255.0 + 0.5).astype(np.uint8)


def _palettize(img: Image.Image) -> Image.Image:
    arr = np.asarray(img)
    colors = np.unique(arr.reshape(-1, 3), axis=0)
    if len(colors) <= 256:
        # Exact palette: every pixel color appears verbatim, so nearest-color
        # mapping is lossless.
        palette = np.zeros((256, 3), dtype=np.uint8)
        palette[:len(colors)] = colors
        pal_img = Image.new("P", (1, 1))
        pal_img.putpalette(palette.flatten().tolist())
        return img.quantize(palette=pal_img, dither=Image.Dither.NONE)
    return img.quantize(colors=256, dither=Image.Dither.NONE)


def export_gif(seq, path, total_duration: float = 5.0) -> GifExport:
    """Write an animated GIF plus a PNG contact sheet.

    Frames are evenly timed so the loop lasts `total_duration` seconds.
    Returns the frames exactly as encoded (after palette quantization),
    so callers can verify a decode round trip.
    """
    frames = seq.frames if hasattr(seq, "frames") else list(seq)
    if not frames:
        raise ValueError("no frames to export")
    path = str(path)
    per_frame_ms = total_duration * 1000.0 / len(frames)
    pal_images = [_palettize(Image.fromarray(_to_uint8(fr))) for fr in frames]
    encoded = [np.asarray(im.convert("RGB")) for im in pal_images]
    pal_images[0].save(
        path, save_all=True, append_images=pal_images[1:],
        duration=per_frame_ms, loop=0, disposal=1)
    h, w = encoded[0].shape[:2]
    sheet = np.concatenate(encoded, axis=1)
    sheet_path = str(path).rsplit(".", 1)[0] + "_sheet.png"
    Image.fromarray(sheet).save(sheet_path)
    return GifExport(path, sheet_path, per_frame_ms, encoded)


def read_gif_frames(path) -> list:
    """Decode a GIF back into a list of uint8 RGB arrays."""
    img = Image.open(path)
    frames = []
    for i in range(getattr(img, "n_frames", 1)):
        img.seek(i)
        frames.append(np.asarray(img.convert("RGB")))
    return frames
