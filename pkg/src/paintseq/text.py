"""Toy text conditioning: a closed vocabulary, tokenizer, and embedding encoder.

The vocabulary is enumerated from the caption grammar (triggers, shape and
color words, backgrounds, counts) so every legal caption tokenizes without
loss. Unknown words map to a reserved UNK id rather than failing, which lets
free-form prompts degrade gracefully.
"""

import math
import string

import torch
from torch import nn

from .strokes.scenes import BACKGROUNDS, NUMBER_WORDS, PALETTE, SHAPE_NAMES, TRIGGERS

PAD_ID = 0
UNK_ID = 1
MAX_TOKENS = 16

_GRAMMAR_WORDS = (
    "painting", "process", "a", "an", "and", "more", "shape", "shapes",
    "on", "background", "many",
)


def build_vocab() -> dict:
    """Token → id for the full caption grammar. Stable across runs."""
    words = ["<pad>", "<unk>"]
    words += [TRIGGERS[k] for k in sorted(TRIGGERS)]
    words += list(_GRAMMAR_WORDS)
    words += sorted(PALETTE)
    words += list(SHAPE_NAMES)
    words += sorted(BACKGROUNDS)
    words += list(NUMBER_WORDS)
    vocab = {}
    for w in words:
        if w not in vocab:
            vocab[w] = len(vocab)
    assert vocab["<pad>"] == PAD_ID and vocab["<unk>"] == UNK_ID
    assert len(vocab) <= 256
    return vocab


VOCAB = build_vocab()
VOCAB_SIZE = len(VOCAB)

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def tokenize(text: str, max_tokens: int = MAX_TOKENS) -> list:
    """Split a prompt into known-word ids, padded/truncated to max_tokens.

    Matching is case-insensitive except for trigger tokens, which are cased
    in the vocabulary and also accepted lowercase. An empty prompt yields
    all padding.
    """
    ids = []
    for raw in text.split():
        word = raw.translate(_PUNCT_TABLE)
        if not word:
            continue
        if word in VOCAB:
            ids.append(VOCAB[word])
        elif word.lower() in VOCAB:
            ids.append(VOCAB[word.lower()])
        else:
            lowered = _match_trigger(word)
            ids.append(VOCAB[lowered] if lowered else UNK_ID)
        if len(ids) == max_tokens:
            break
    ids += [PAD_ID] * (max_tokens - len(ids))
    return ids


def _match_trigger(word: str):
    for trig in TRIGGERS.values():
        if word.lower() == trig.lower():
            return trig
    return None


def tokenize_batch(texts: list, max_tokens: int = MAX_TOKENS) -> torch.Tensor:
    return torch.tensor([tokenize(t, max_tokens) for t in texts], dtype=torch.long)


def sinusoidal_encoding(values: torch.Tensor, dim: int) -> torch.Tensor:
    """Sin/cos features for arbitrary scalar positions: (...,) -> (..., dim).

    Shared by token positions, frame positions, and timestep embeddings.
    Requires even dim; computed in float64 for stable frequencies.
    """
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    pos = values.to(torch.float64).unsqueeze(-1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64, device=values.device)
                    * (-math.log(10000.0) / dim))
    out = torch.empty(*values.shape, dim, dtype=torch.float64, device=values.device)
    out[..., 0::2] = torch.sin(pos * div)
    out[..., 1::2] = torch.cos(pos * div)
    return out


def sinusoidal_positions(n: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed sin/cos table of shape (n, dim) for token slots 0..n-1."""
    return sinusoidal_encoding(torch.arange(n), dim).to(dtype)


class TextEncoder(nn.Module):
    """Embedding table plus fixed positional table; no transformer."""

    def __init__(self, text_dim: int, vocab_size: int = VOCAB_SIZE,
                 max_tokens: int = MAX_TOKENS):
        super().__init__()
        self.text_dim = text_dim
        self.max_tokens = max_tokens
        self.embedding = nn.Embedding(vocab_size, text_dim)
        self.register_buffer(
            "positions", sinusoidal_positions(max_tokens, text_dim), persistent=False)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        if token_ids.ndim != 2 or token_ids.shape[1] != self.max_tokens:
            raise ValueError(
                f"expected (b, {self.max_tokens}) token ids, got {tuple(token_ids.shape)}")
        emb = self.embedding(token_ids)
        return emb + self.positions.to(emb.dtype).unsqueeze(0)
