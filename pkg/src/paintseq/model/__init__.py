from .config import ModelConfig
from .blocks import (
    CrossAttention,
    ResBlock,
    SelfAttention,
    TemporalAttention,
    scaled_attention,
)
from .unet import SequenceUNet, load_model_checkpoint, save_model_checkpoint

__all__ = [
    "CrossAttention",
    "ModelConfig",
    "ResBlock",
    "SelfAttention",
    "SequenceUNet",
    "TemporalAttention",
    "load_model_checkpoint",
    "save_model_checkpoint",
    "scaled_attention",
]
