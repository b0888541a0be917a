"""The sequence denoiser: a UNet over (b, f, c, h, w) latent stacks.

Frames are folded into the batch axis for all convolutional and in-frame
attention work, then regrouped only inside temporal attention, so a model
whose temporal projections are still zero computes exactly what a per-frame
image UNet would. Decoder skip junctions accept optional side-network
features fused as `skip + lambda * feature`, and skip the add entirely when
no features are given or lambda is zero.
"""

import contextlib

import torch
from torch import nn

from ..text import TextEncoder, sinusoidal_encoding
from .blocks import (
    AttentionTriple,
    CrossAttention,
    Downsample,
    ResBlock,
    SelfAttention,
    TemporalAttention,
    Upsample,
    norm_groups,
)
from .config import ModelConfig


class _TemporalPassthrough(nn.Module):
    def forward(self, x, b, f, frame_positions=None):
        return x


class SequenceUNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        chans = config.level_channels()
        time_dim = config.base_channels * 4

        self.text_encoder = TextEncoder(config.text_dim, max_tokens=config.max_tokens)
        self.time_mlp = nn.Sequential(
            nn.Linear(config.base_channels, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )
        self.conv_in = nn.Conv2d(config.in_channels, chans[0], 3, padding=1)

        skip_chs = [chans[0]]
        self.down = nn.ModuleList()
        ch = chans[0]
        for i, level_ch in enumerate(chans):
            level = nn.Module()
            level.res = nn.ModuleList()
            level.attn = nn.ModuleList()
            for _ in range(config.num_res_blocks):
                level.res.append(ResBlock(ch, level_ch, time_dim))
                level.attn.append(
                    AttentionTriple(level_ch, config.text_dim, config.heads))
                ch = level_ch
                skip_chs.append(ch)
            if i < len(chans) - 1:
                level.downsample = Downsample(ch)
                skip_chs.append(ch)
            else:
                level.downsample = None
            self.down.append(level)

        self.mid_res1 = ResBlock(ch, ch, time_dim)
        self.mid_attn = AttentionTriple(ch, config.text_dim, config.heads)
        self.mid_res2 = ResBlock(ch, ch, time_dim)

        self.up = nn.ModuleList()
        for i in reversed(range(len(chans))):
            level_ch = chans[i]
            level = nn.Module()
            level.res = nn.ModuleList()
            level.attn = nn.ModuleList()
            for _ in range(config.num_res_blocks + 1):
                level.res.append(ResBlock(ch + skip_chs.pop(), level_ch, time_dim))
                level.attn.append(
                    AttentionTriple(level_ch, config.text_dim, config.heads))
                ch = level_ch
            level.upsample = Upsample(ch) if i > 0 else None
            self.up.append(level)
        assert not skip_chs

        self.out_norm = nn.GroupNorm(norm_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, config.in_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    # ---------------------------------------------------------------- text
    def encode_text(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.text_encoder(token_ids)

    # ------------------------------------------------------------- forward
    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        text_emb: torch.Tensor,
        frame_positions: torch.Tensor = None,
        arn_features: list = None,
        fusion_lambda: float = 1.0,
    ) -> torch.Tensor:
        """Predict the noise in z. z: (b, f, c, h, w), t: (b,) timesteps.

        `arn_features` is a list aligned with the encoder's skip stack;
        each entry is added to its skip scaled by fusion_lambda before the
        decoder consumes it.
        """
        cfg = self.config
        if z.ndim != 5:
            raise ValueError(f"expected 5D (b,f,c,h,w) input, got {z.ndim}D")
        b, f, c, h, w = z.shape
        if c != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} channels, got {c}")
        if h != cfg.resolution or w != cfg.resolution:
            raise ValueError(
                f"expected {cfg.resolution}x{cfg.resolution} input, got {h}x{w}")
        if text_emb.ndim != 3 or text_emb.shape[0] != b:
            raise ValueError("text embedding must be (b, n_tokens, text_dim)")
        t = torch.as_tensor(t, device=z.device).reshape(-1)
        if t.shape[0] != b:
            raise ValueError("t must have one entry per batch item")
        if frame_positions is None:
            frame_positions = torch.arange(f, device=z.device)

        x = z.reshape(b * f, c, h, w)
        t_emb = sinusoidal_encoding(t.to(torch.float64), cfg.base_channels)
        t_emb = self.time_mlp(t_emb.to(z.dtype))
        t_emb = t_emb.repeat_interleave(f, dim=0)
        ctx = text_emb.to(z.dtype).repeat_interleave(f, dim=0)

        fuse = arn_features is not None and fusion_lambda != 0.0
        if arn_features is not None:
            arn_features = list(arn_features)

        x = self.conv_in(x)
        skips = [x]
        for level in self.down:
            for res, attn in zip(level.res, level.attn):
                x = res(x, t_emb)
                x = attn(x, b, f, ctx, frame_positions)
                skips.append(x)
            if level.downsample is not None:
                x = level.downsample(x)
                skips.append(x)

        x = self.mid_res1(x, t_emb)
        x = self.mid_attn(x, b, f, ctx, frame_positions)
        x = self.mid_res2(x, t_emb)

        for level in self.up:
            for res, attn in zip(level.res, level.attn):
                skip = skips.pop()
                if arn_features is not None:
                    feat = arn_features.pop()
                    if fuse:
                        skip = skip + fusion_lambda * feat
                x = res(torch.cat([x, skip], dim=1), t_emb)
                x = attn(x, b, f, ctx, frame_positions)
            if level.upsample is not None:
                x = level.upsample(x)
        assert not skips

        x = self.conv_out(torch.nn.functional.silu(self.out_norm(x)))
        return x.reshape(b, f, c, h, w)

    @contextlib.contextmanager
    def spatial_only(self):
        """Temporarily bypass every temporal attention block.

        Inside the context the model is a pure per-frame denoiser; with
        zero-initialized temporal output projections the bypassed forward
        is bitwise identical to the normal one, which is the invariant the
        pretraining start relies on.
        """
        swapped = []
        try:
            for module in self.modules():
                if isinstance(module, AttentionTriple):
                    swapped.append((module, module.temporal))
                    module.temporal = _TemporalPassthrough()
            yield self
        finally:
            for module, orig in swapped:
                module.temporal = orig

    # ------------------------------------------------------------ registry
    def attention_registry(self) -> dict:
        """Name → group for every attention projection eligible for adapters.

        Names address nn.Linear modules (to_q/to_k/to_v/to_out); groups are
        'spatial' (self + cross) or 'temporal'.
        """
        registry = {}
        for path, module in self.named_modules():
            if isinstance(module, (SelfAttention, CrossAttention, TemporalAttention)):
                for proj in ("to_q", "to_k", "to_v", "to_out"):
                    registry[f"{path}.{proj}"] = module.group
        return registry

    def temporal_parameter_names(self) -> set:
        names = set()
        for path, module in self.named_modules():
            if isinstance(module, TemporalAttention):
                for pname, _ in module.named_parameters():
                    names.add(f"{path}.{pname}")
        return names

    def parameter_groups(self) -> dict:
        """Split parameters into the temporal set and everything else."""
        temporal_names = self.temporal_parameter_names()
        groups = {"temporal": [], "spatial": []}
        for name, p in self.named_parameters():
            groups["temporal" if name in temporal_names else "spatial"].append(p)
        return groups


def save_model_checkpoint(model: SequenceUNet, path, extra: dict = None) -> None:
    payload = {
        "config": model.config.to_dict(),
        "state_dict": {k: v.cpu() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_model_checkpoint(path, expected_config: ModelConfig = None):
    """Rebuild a model from disk; refuses configs that don't match."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = ModelConfig.from_dict(payload["config"])
    if expected_config is not None and config != expected_config:
        raise ValueError(
            f"checkpoint config {config} does not match expected {expected_config}")
    model = SequenceUNet(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
