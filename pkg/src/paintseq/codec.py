"""Image ↔ latent mapping: an exact pixel-space mode and a small learned one.

Identity mode maps [0,1] pixels to [-1,1] latents with z = 2x - 1. One
subtlety is worth knowing: floating point cannot represent 2x - 1 exactly
for every x below 0.25 (that interval holds more doubles than [-1,-0.5]
does), so a single round trip may perturb such values by up to 2^-55. The
map is exactly invertible on its own range, so `normalize` (one round trip)
projects any canvas onto the domain where decode(encode(x)) == x holds
bitwise; pipelines apply it at the boundary.
"""

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .util import torch_generator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CodecConfig:
    mode: str = "identity"
    downsample_factor: int = 1
    latent_channels: int = 3

    def validate(self) -> None:
        if self.mode not in ("identity", "learned"):
            raise ValueError(f"unknown codec mode {self.mode!r}")
        if self.mode == "identity":
            if self.downsample_factor != 1 or self.latent_channels != 3:
                raise ValueError(
                    "identity mode requires downsample_factor=1, latent_channels=3")
        else:
            if self.downsample_factor < 1:
                raise ValueError("downsample_factor must be >= 1")
            if self.latent_channels < 1:
                raise ValueError("latent_channels must be >= 1")


def canvases_to_tensor(frames, dtype=torch.float64) -> torch.Tensor:
    """(H,W,3) float canvases -> (n, 3, H, W) tensor."""
    arr = np.stack([np.asarray(f) for f in frames])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype)


def tensor_to_canvases(batch: torch.Tensor) -> list:
    """(n, 3, H, W) tensor -> list of (H,W,3) float64 canvases."""
    arr = batch.detach().to(torch.float64).permute(0, 2, 3, 1).cpu().numpy()
    return [np.ascontiguousarray(a) for a in arr]


def _fold(x: torch.Tensor):
    """Accept (b,c,h,w) or (b,f,c,h,w); return folded 4D view + unfold info."""
    if x.ndim == 5:
        b, f = x.shape[:2]
        return x.reshape(b * f, *x.shape[2:]), (b, f)
    if x.ndim == 4:
        return x, None
    raise ValueError(f"expected 4D or 5D tensor, got {x.ndim}D")


def _unfold(x: torch.Tensor, info):
    if info is None:
        return x
    b, f = info
    return x.reshape(b, f, *x.shape[1:])


class IdentityCodec:
    """Pixel-space passthrough: z = 2x - 1, x = clip((z + 1) / 2)."""

    def __init__(self):
        self.config = CodecConfig()

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        x, info = _fold(images)
        self._check_image(x)
        return _unfold(2.0 * x - 1.0, info)

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        z, info = _fold(latents)
        if z.shape[1] != 3:
            raise ValueError(f"expected 3 latent channels, got {z.shape[1]}")
        return _unfold(torch.clamp((z + 1.0) / 2.0, 0.0, 1.0), info)

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        """Project onto the exactly-invertible domain (one round trip)."""
        return self.decode(self.encode(images))

    def parameters(self):
        return iter(())

    @staticmethod
    def _check_image(x: torch.Tensor) -> None:
        if x.shape[1] != 3:
            raise ValueError(f"expected 3 image channels, got {x.shape[1]}")


class _Encoder(nn.Module):
    def __init__(self, latent_channels: int, width: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width * 2, latent_channels, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class _Decoder(nn.Module):
    def __init__(self, latent_channels: int, width: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(latent_channels, width * 2, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width * 2, width, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width, 3, 3, padding=1),
        )

    def forward(self, z):
        return torch.sigmoid(self.net(z))


class LearnedCodec(nn.Module):
    """Small convolutional autoencoder, 4x spatial reduction."""

    def __init__(self, config: CodecConfig = None, width: int = 48):
        super().__init__()
        self.config = config or CodecConfig(mode="learned", downsample_factor=4,
                                            latent_channels=4)
        self.config.validate()
        if self.config.mode != "learned":
            raise ValueError("LearnedCodec requires mode='learned'")
        if self.config.downsample_factor != 4:
            raise ValueError("learned codec implements downsample_factor=4")
        self.width = width
        self.encoder = _Encoder(self.config.latent_channels, width)
        self.decoder = _Decoder(self.config.latent_channels, width)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        x, info = _fold(images)
        if x.shape[-1] % self.config.downsample_factor != 0:
            raise ValueError(
                f"resolution {x.shape[-1]} not divisible by "
                f"{self.config.downsample_factor}")
        return _unfold(self.encoder(x.to(torch.float32)), info)

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        z, info = _fold(latents)
        if z.shape[1] != self.config.latent_channels:
            raise ValueError(
                f"expected {self.config.latent_channels} latent channels, "
                f"got {z.shape[1]}")
        return _unfold(torch.clamp(self.decoder(z.to(torch.float32)), 0.0, 1.0), info)

    def feature_maps(self, images: torch.Tensor) -> torch.Tensor:
        """Encoder features for the perceptual proxy metric."""
        return self.encode(images)


def build_codec(config: CodecConfig, width: int = 48):
    config.validate()
    if config.mode == "identity":
        return IdentityCodec()
    return LearnedCodec(config, width=width)


def train_codec(
    codec: LearnedCodec,
    frames: torch.Tensor,
    epochs: int = 120,
    lr: float = 3e-3,
    lr_min: float = 5e-4,
    batch_size: int = 16,
    seed: int = 0,
):
    """Reconstruction training with cosine learning-rate decay.

    Returns per-epoch mean losses. Aborts on divergence rather than
    writing garbage checkpoints.
    """
    frames = frames.to(torch.float32)
    gen = torch_generator(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(1, epochs - 1), eta_min=lr_min)
    n = frames.shape[0]
    epoch_losses = []
    for epoch in range(epochs):
        order = torch.randperm(n, generator=gen)
        losses = []
        for start in range(0, n, batch_size):
            batch = frames[order[start:start + batch_size]]
            opt.zero_grad()
            recon = codec.decode(codec.encode(batch))
            loss = torch.mean(torch.square(recon - batch))
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"codec training diverged at epoch {epoch} (loss={loss.item()})")
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        sched.step()
        epoch_losses.append(sum(losses) / len(losses))
        logger.debug("codec epoch %d: loss %.5f", epoch, epoch_losses[-1])
    return epoch_losses


def save_codec(codec, path) -> None:
    state = codec.state_dict() if isinstance(codec, nn.Module) else {}
    width = getattr(codec, "width", 48)
    torch.save({"config": asdict(codec.config), "width": width,
                "state_dict": state}, path)


def load_codec(path, expected_config: CodecConfig = None):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = CodecConfig(**payload["config"])
    if expected_config is not None and config != expected_config:
        raise ValueError(
            f"codec checkpoint config {config} does not match expected "
            f"{expected_config}")
    codec = build_codec(config, width=payload.get("width", 48))
    if isinstance(codec, nn.Module):
        codec.load_state_dict(payload["state_dict"])
        codec.eval()
    return codec
