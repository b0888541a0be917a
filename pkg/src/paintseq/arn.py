"""Reference-frame conditioning network for the sequence denoiser.

A trainable copy of the denoiser's encoder (input conv, down levels, time
embedding) runs on a per-frame stack that is Gaussian noise except at
conditioned positions, where the encoded reference frame sits instead. Its
temporal attention blocks are fresh (not copied) so the copy can learn how
conditioned frames should steer their neighbors, and each skip-level output
passes through a zero-initialized 1x1 projection, so a freshly built
network is an exact no-op on the frozen denoiser. Conditioning reaches the
denoiser as an affine nudge where encoder skips meet the decoder:
``skip + lambda * feature``.

The base painting model stays frozen throughout; training moves only this
network's weights, which a hash over the base guards.
"""

import copy
import hashlib
from dataclasses import dataclass

import torch
from torch import nn

from .diffusion import NoiseSchedule, loss_simple, q_sample
from .model.blocks import TemporalAttention
from .model.config import ModelConfig
from .model.unet import SequenceUNet
from .text import sinusoidal_encoding, tokenize_batch
from .util import derive_seed, np_rng, state_dict_hash, torch_generator


@dataclass(frozen=True)
class ARNConfig:
    """Fusion strength and projection init for one conditioning network."""

    fusion_lambda: float = 1.0
    zero_init: bool = True

    def validate(self) -> None:
        lam = float(self.fusion_lambda)
        if not (lam == lam and abs(lam) != float("inf")):
            raise ValueError("fusion_lambda must be finite")
        if lam < 0:
            raise ValueError("fusion_lambda must be >= 0")

    def to_dict(self) -> dict:
        return {"fusion_lambda": self.fusion_lambda, "zero_init": self.zero_init}


@dataclass
class FrameCondition:
    """One conditioned slot: frame index tau carries this reference latent."""

    tau: int
    ref_latent: torch.Tensor

    def validate(self, f: int = None, shape=None) -> None:
        if int(self.tau) != self.tau or self.tau < 0:
            raise ValueError(f"tau must be a non-negative frame index, got {self.tau}")
        if f is not None and self.tau >= f:
            raise ValueError(f"tau {self.tau} out of range for f={f}")
        if not torch.isfinite(self.ref_latent).all():
            raise ValueError("ref_latent must be finite")
        if shape is not None and tuple(self.ref_latent.shape) != tuple(shape):
            raise ValueError(
                f"ref_latent shape {tuple(self.ref_latent.shape)} does not "
                f"match latent shape {tuple(shape)}")


def _seeded_linear_init(linear: nn.Linear, gen: torch.Generator) -> None:
    """Default-Linear-like init (uniform +-1/sqrt(fan_in)) from our generator."""
    bound = linear.in_features ** -0.5
    with torch.no_grad():
        linear.weight.copy_(
            (torch.rand(linear.weight.shape, generator=gen) * 2 - 1) * bound)
        if linear.bias is not None:
            linear.bias.copy_(
                (torch.rand(linear.bias.shape, generator=gen) * 2 - 1) * bound)


def _seeded_conv_init(conv: nn.Conv2d, gen: torch.Generator) -> None:
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    bound = fan_in ** -0.5
    with torch.no_grad():
        conv.weight.copy_(
            (torch.rand(conv.weight.shape, generator=gen) * 2 - 1) * bound)
        if conv.bias is not None:
            conv.bias.copy_(
                (torch.rand(conv.bias.shape, generator=gen) * 2 - 1) * bound)


class ArnModel(nn.Module):
    """Encoder copy + fresh temporal attention + zero skip projections."""

    def __init__(self, base: SequenceUNet, config: ARNConfig = ARNConfig(),
                 seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        self.model_config = base.config
        self.base_fingerprint = state_dict_hash(base)

        self.time_mlp = copy.deepcopy(base.time_mlp)
        self.conv_in = copy.deepcopy(base.conv_in)
        self.down = copy.deepcopy(base.down)

        gen = torch_generator(derive_seed(seed, "arn-temporal"))
        for level in self.down:
            for attn in level.attn:
                channels = attn.spatial.to_q.in_features
                fresh = TemporalAttention(channels, base.config.heads)
                for proj in (fresh.to_q, fresh.to_k, fresh.to_v):
                    _seeded_linear_init(proj, gen)
                attn.temporal = fresh

        cfg = base.config
        chans = cfg.level_channels()
        skip_chs = [chans[0]]
        ch = chans[0]
        for i, level_ch in enumerate(chans):
            for _ in range(cfg.num_res_blocks):
                ch = level_ch
                skip_chs.append(ch)
            if i < len(chans) - 1:
                skip_chs.append(ch)
        self.projections = nn.ModuleList(
            nn.Conv2d(c, c, 1) for c in skip_chs)
        proj_gen = torch_generator(derive_seed(seed, "arn-proj"))
        for proj in self.projections:
            if config.zero_init:
                nn.init.zeros_(proj.weight)
                nn.init.zeros_(proj.bias)
            else:
                _seeded_conv_init(proj, proj_gen)

    def forward(self, x: torch.Tensor, t: torch.Tensor, text_emb: torch.Tensor,
                frame_positions: torch.Tensor = None) -> list:
        """Per-level conditioning features, aligned with the denoiser skips.

        `x` is the (b, f, c, h, w) condition stack from `make_arn_input`;
        `t` and `text_emb` are the same values the denoiser sees.
        """
        cfg = self.model_config
        if x.ndim != 5:
            raise ValueError(f"expected 5D (b,f,c,h,w) input, got {x.ndim}D")
        b, f, c, h, w = x.shape
        if c != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} channels, got {c}")
        if h != cfg.resolution or w != cfg.resolution:
            raise ValueError(
                f"expected {cfg.resolution}x{cfg.resolution} input, got {h}x{w}")
        if frame_positions is None:
            frame_positions = torch.arange(f, device=x.device)

        x = x.reshape(b * f, c, h, w)
        t = torch.as_tensor(t, device=x.device).reshape(-1)
        t_emb = sinusoidal_encoding(t.to(torch.float64), cfg.base_channels)
        t_emb = self.time_mlp(t_emb.to(x.dtype))
        t_emb = t_emb.repeat_interleave(f, dim=0)
        ctx = text_emb.to(x.dtype).repeat_interleave(f, dim=0)

        x = self.conv_in(x)
        feats = [x]
        for level in self.down:
            for res, attn in zip(level.res, level.attn):
                x = res(x, t_emb)
                x = attn(x, b, f, ctx, frame_positions)
                feats.append(x)
            if level.downsample is not None:
                x = level.downsample(x)
                feats.append(x)
        return [proj(feat) for proj, feat in zip(self.projections, feats)]

    def parameter_budget(self) -> dict:
        """Split of this network's parameter count by provenance."""
        temporal = sum(p.numel() for m in self.modules()
                       if isinstance(m, TemporalAttention)
                       for p in m.parameters())
        projections = sum(p.numel() for p in self.projections.parameters())
        total = sum(p.numel() for p in self.parameters())
        return {
            "copied": total - temporal - projections,
            "temporal": temporal,
            "projections": projections,
            "total": total,
        }

    def copied_state_hash(self) -> str:
        """Hash of the weights copied from the base encoder (shared naming)."""
        state = {k: v for k, v in self.state_dict().items()
                 if not k.startswith("projections.") and ".temporal." not in k}
        return _subset_hash(state)


def _subset_hash(state: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def base_encoder_hash(model: SequenceUNet) -> str:
    """Hash of the base-model subset an ArnModel copies, same key naming."""
    state = {k: v for k, v in model.state_dict().items()
             if k.startswith(("time_mlp.", "conv_in.", "down."))
             and ".temporal." not in k}
    return _subset_hash(state)


def build_arn(painting_model: SequenceUNet, config: ARNConfig = ARNConfig(),
              seed: int = 0) -> ArnModel:
    """Conditioning network for a trained, frozen painting model."""
    return ArnModel(painting_model, config, seed=seed)


# ----------------------------------------------------------- condition IO

def make_arn_input(f: int, conditions, seed: int, channels: int,
                   resolution: int) -> torch.Tensor:
    """(f, c, h, w) stack: Gaussian noise, reference latents at their taus."""
    if f < 1:
        raise ValueError("f must be >= 1")
    taus = [cond.tau for cond in conditions]
    if len(set(taus)) != len(taus):
        raise ValueError(f"duplicate condition taus: {sorted(taus)}")
    stack = torch.randn(f, channels, resolution, resolution,
                        generator=torch_generator(seed))
    shape = (channels, resolution, resolution)
    for cond in conditions:
        cond.validate(f=f, shape=shape)
        stack[cond.tau] = cond.ref_latent.to(stack.dtype)
    return stack


def fuse(unet_features, arn_features, fusion_lambda: float) -> list:
    """Per-level affine fusion: fused_n = base_n + lambda * extra_n."""
    if len(unet_features) != len(arn_features):
        raise ValueError(
            f"feature lists differ in length: {len(unet_features)} vs "
            f"{len(arn_features)}")
    fused = []
    for i, (u, a) in enumerate(zip(unet_features, arn_features)):
        if u.shape != a.shape:
            raise ValueError(
                f"feature shape mismatch at level {i}: {tuple(u.shape)} vs "
                f"{tuple(a.shape)}")
        fused.append(u + fusion_lambda * a)
    return fused


# ------------------------------------------------------ position sampling

def sample_condition_positions(f: int, k: int, rng) -> list:
    """k distinct conditioned frame indices.

    Each draw lands on the first frame with probability 1/3, the last with
    probability 1/3, and otherwise on a middle index from a discretized
    normal centered at f/2 with sigma f/4, truncated to {1..f-2}. Draws
    that collide with an already-chosen position are rejected and redrawn.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k > f:
        raise ValueError(f"cannot place {k} distinct conditions in {f} frames")
    positions = set()
    while len(positions) < k:
        u = rng.random()
        if u < 1.0 / 3.0:
            cand = 0
        elif u < 2.0 / 3.0:
            cand = f - 1
        else:
            if f < 3:
                continue  # no middle slots exist; redraw the branch
            while True:
                cand = int(round(rng.normal(f / 2.0, f / 4.0)))
                if 1 <= cand <= f - 2:
                    break
        if cand in positions:
            continue
        positions.add(cand)
    return sorted(positions)


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class ArnTrainConfig:
    """Settings for conditioning-network training (recorded in manifests)."""

    steps: int = 200
    lr: float = 3e-3
    batch_size: int = 4
    seed: int = 0
    k_max: int = 3
    optimizer: str = "adam"

    def to_dict(self) -> dict:
        return {
            "steps": self.steps, "lr": self.lr, "batch_size": self.batch_size,
            "seed": self.seed, "k_max": self.k_max, "optimizer": self.optimizer,
        }


@dataclass
class ArnTrainResult:
    losses: list
    config: ArnTrainConfig
    frozen_base_hash: str

    @property
    def loss_start(self) -> float:
        k = max(1, min(10, len(self.losses) // 2))
        return float(sum(self.losses[:k]) / k)

    @property
    def loss_end(self) -> float:
        k = max(1, min(10, len(self.losses) // 2))
        return float(sum(self.losses[-k:]) / k)

    def to_manifest(self) -> dict:
        return {
            "loss_start": self.loss_start,
            "loss_end": self.loss_end,
            "frozen_base_hash": self.frozen_base_hash,
            **self.config.to_dict(),
        }


def train_arn(model: SequenceUNet, arn: ArnModel, schedule: NoiseSchedule,
              sequence_latents: torch.Tensor, captions,
              cfg: ArnTrainConfig = ArnTrainConfig()) -> ArnTrainResult:
    """Train the conditioning network against its frozen painting model.

    Per training sample, k ~ Uniform{0..k_max} frames are conditioned at
    positions from `sample_condition_positions`, carrying the sample's own
    clean latents as references; the denoiser then predicts the noise on
    the fully noised sequence with fusion enabled, and only the
    conditioning network's parameters move (the base is hash-guarded).
    """
    if sequence_latents.ndim != 5:
        raise ValueError(
            f"sequence_latents must be (n, f, c, h, w), got "
            f"{sequence_latents.ndim}D")
    n, f, c, h, w = sequence_latents.shape
    if n == 0:
        raise ValueError("no training examples")
    if len(captions) != n:
        raise ValueError(f"{n} latents but {len(captions)} captions")
    if cfg.optimizer != "adam":
        raise ValueError(f"unsupported optimizer {cfg.optimizer!r}")
    if cfg.steps < 1:
        raise ValueError("steps must be >= 1")
    if arn.base_fingerprint != state_dict_hash(model):
        raise ValueError(
            "conditioning network was built for a different base model")

    with torch.no_grad():
        token_ids = tokenize_batch(list(captions), model.config.max_tokens)
        embeddings = model.encode_text(token_ids).to(sequence_latents.dtype)

    base_requires_grad = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    base_hash_before = state_dict_hash(model)

    optimizer = torch.optim.Adam(arn.parameters(), lr=cfg.lr)
    order = np_rng(derive_seed(cfg.seed, "order"))
    sampler = np_rng(derive_seed(cfg.seed, "positions"))
    losses = []
    lam = arn.config.fusion_lambda
    for step in range(cfg.steps):
        idx = torch.as_tensor(order.integers(0, n, size=cfg.batch_size))
        x0 = sequence_latents[idx]
        gen = torch_generator(derive_seed(cfg.seed, "noise", step))
        t = torch.randint(0, schedule.T, (cfg.batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        xt = q_sample(x0, t, eps, schedule)

        stacks = []
        for j in range(cfg.batch_size):
            k = int(sampler.integers(0, cfg.k_max + 1))
            positions = sample_condition_positions(f, min(k, f), sampler)
            conditions = [FrameCondition(tau=p, ref_latent=x0[j, p])
                          for p in positions]
            stacks.append(make_arn_input(
                f, conditions, derive_seed(cfg.seed, "stack", step, j), c, h))
        arn_in = torch.stack(stacks).to(x0.dtype)

        emb = embeddings[idx]
        features = arn(arn_in, t, emb)
        pred = model(xt, t, emb, arn_features=features, fusion_lambda=lam)
        loss = loss_simple(pred, eps)
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"conditioning-network training diverged at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))

    if state_dict_hash(model) != base_hash_before:
        raise AssertionError(
            "frozen base model changed during conditioning-network training")
    for p, flag in zip(model.parameters(), base_requires_grad):
        p.requires_grad_(flag)
    return ArnTrainResult(losses=losses, config=cfg,
                          frozen_base_hash=base_hash_before)


# ------------------------------------------------------------------ disk IO

def save_arn(arn: ArnModel, path) -> None:
    payload = {
        "config": arn.config.to_dict(),
        "model_config": arn.model_config.to_dict(),
        "base_fingerprint": arn.base_fingerprint,
        "state_dict": {k: v.cpu() for k, v in arn.state_dict().items()},
    }
    torch.save(payload, path)


def load_arn(path, base_model: SequenceUNet) -> ArnModel:
    """Rebuild a conditioning network; refuses a mismatched base model."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    fingerprint = state_dict_hash(base_model)
    if payload["base_fingerprint"] != fingerprint:
        raise ValueError(
            "checkpoint was trained against a different base model "
            f"(fingerprint {payload['base_fingerprint'][:12]}..., "
            f"got {fingerprint[:12]}...)")
    stored_cfg = ModelConfig.from_dict(payload["model_config"])
    if stored_cfg != base_model.config:
        raise ValueError("checkpoint model config does not match base model")
    arn = ArnModel(base_model, ARNConfig(**payload["config"]))
    arn.load_state_dict(payload["state_dict"])
    arn.eval()
    return arn
