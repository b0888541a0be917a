"""UNet building blocks: residual convolutions and the three attention kinds.

Attention projections are plain nn.Linear modules named to_q/to_k/to_v/to_out
so adapter injection can address them through a stable registry. Temporal
attention starts as an exact no-op: its output projection is zero-initialized
and sits on a residual path, so a fresh sequence model computes frame-by-frame
spatial results bitwise until training moves those weights.
"""

import torch
from torch import nn

from ..text import sinusoidal_encoding


def norm_groups(channels: int) -> int:
    """Largest power of two ≤ min(32, channels) that divides channels."""
    g = min(32, channels)
    while g > 1 and channels % g != 0:
        g //= 2
    return g


def scaled_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int):
    """Multi-head softmax attention over token axis.

    q, k, v: (B, N, C) with C divisible by heads; scale is 1/sqrt(per-head
    dim). Returns (output (B, N, C), weights (B, heads, Nq, Nk)).
    """
    B, Nq, C = q.shape
    Nk = k.shape[1]
    hd = C // heads
    q = q.reshape(B, Nq, heads, hd).transpose(1, 2)
    k = k.reshape(B, Nk, heads, hd).transpose(1, 2)
    v = v.reshape(B, Nk, heads, hd).transpose(1, 2)
    weights = torch.softmax(q @ k.transpose(-2, -1) * hd ** -0.5, dim=-1)
    out = (weights @ v).transpose(1, 2).reshape(B, Nq, C)
    return out, weights


class ResBlock(nn.Module):
    """Two 3x3 convolutions with a timestep shift and a residual path."""

    def __init__(self, in_channels: int, out_channels: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(norm_groups(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm2 = nn.GroupNorm(norm_groups(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        if in_channels != out_channels:
            self.skip = nn.Conv2d(in_channels, out_channels, 1)
        else:
            self.skip = nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(torch.nn.functional.silu(t_emb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    """Spatial self-attention: every pixel attends within its own frame."""

    group = "spatial"

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(norm_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.to_out = nn.Linear(channels, channels)

    def _tokens(self, x: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        return self.norm(x).reshape(B, C, H * W).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        tokens = self._tokens(x)
        out, _ = scaled_attention(
            self.to_q(tokens), self.to_k(tokens), self.to_v(tokens), self.heads)
        out = self.to_out(out).transpose(1, 2).reshape(B, C, H, W)
        return x + out

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self._tokens(x)
        _, w = scaled_attention(
            self.to_q(tokens), self.to_k(tokens), self.to_v(tokens), self.heads)
        return w


class CrossAttention(nn.Module):
    """Pixels attend over text tokens; keys/values come from the prompt."""

    group = "spatial"

    def __init__(self, channels: int, context_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(norm_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(context_dim, channels)
        self.to_v = nn.Linear(context_dim, channels)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        tokens = self.norm(x).reshape(B, C, H * W).transpose(1, 2)
        out, _ = scaled_attention(
            self.to_q(tokens), self.to_k(context), self.to_v(context), self.heads)
        out = self.to_out(out).transpose(1, 2).reshape(B, C, H, W)
        return x + out

    def attention_weights(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        tokens = self.norm(x).reshape(x.shape[0], x.shape[1], -1).transpose(1, 2)
        _, w = scaled_attention(
            self.to_q(tokens), self.to_k(context), self.to_v(context), self.heads)
        return w


class TemporalAttention(nn.Module):
    """Frame-axis attention at each spatial position.

    Input arrives folded as (b*f, c, h, w); the block regroups it to
    ((b*h*w), f, c), adds a sinusoidal encoding of each frame's position,
    and attends across the f axis. to_out starts at zero so the block is an
    exact identity until trained.
    """

    group = "temporal"

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.to_out = nn.Linear(channels, channels)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)

    def _frame_tokens(self, x: torch.Tensor, b: int, f: int,
                      frame_positions: torch.Tensor):
        bf, C, H, W = x.shape
        seq = x.reshape(b, f, C, H, W).permute(0, 3, 4, 1, 2).reshape(b * H * W, f, C)
        tokens = self.norm(seq)
        pos = sinusoidal_encoding(frame_positions, C).to(tokens.dtype)
        return seq, tokens + pos.unsqueeze(0)

    def forward(self, x: torch.Tensor, b: int, f: int,
                frame_positions: torch.Tensor = None) -> torch.Tensor:
        bf, C, H, W = x.shape
        if frame_positions is None:
            frame_positions = torch.arange(f, device=x.device)
        seq, tokens = self._frame_tokens(x, b, f, frame_positions)
        out, _ = scaled_attention(
            self.to_q(tokens), self.to_k(tokens), self.to_v(tokens), self.heads)
        seq = seq + self.to_out(out)
        return seq.reshape(b, H, W, f, C).permute(0, 3, 4, 1, 2).reshape(bf, C, H, W)

    def attention_weights(self, x: torch.Tensor, b: int, f: int,
                          frame_positions: torch.Tensor = None) -> torch.Tensor:
        if frame_positions is None:
            frame_positions = torch.arange(f, device=x.device)
        _, tokens = self._frame_tokens(x, b, f, frame_positions)
        _, w = scaled_attention(
            self.to_q(tokens), self.to_k(tokens), self.to_v(tokens), self.heads)
        return w


class AttentionTriple(nn.Module):
    """Spatial self-attention, text cross-attention, then temporal attention."""

    def __init__(self, channels: int, context_dim: int, heads: int):
        super().__init__()
        self.spatial = SelfAttention(channels, heads)
        self.cross = CrossAttention(channels, context_dim, heads)
        self.temporal = TemporalAttention(channels, heads)

    def forward(self, x: torch.Tensor, b: int, f: int, context: torch.Tensor,
                frame_positions: torch.Tensor = None) -> torch.Tensor:
        x = self.spatial(x)
        x = self.cross(x, context)
        return self.temporal(x, b, f, frame_positions)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(torch.nn.functional.interpolate(x, scale_factor=2.0,
                                                         mode="nearest"))
