"""Architecture hyperparameters for the sequence denoiser."""

from dataclasses import dataclass, field, asdict


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the denoiser. Defaults are the desk-scale configuration."""

    resolution: int = 64
    in_channels: int = 3
    base_channels: int = 64
    channel_mults: tuple = (1, 2, 4)
    num_res_blocks: int = 2
    f: int = 8
    text_dim: int = 128
    heads: int = 4
    max_tokens: int = 16

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(self.channel_mults))

    def validate(self) -> None:
        if self.f < 1:
            raise ValueError("f must be >= 1")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.base_channels % 2 != 0:
            raise ValueError("base_channels must be even")
        if not self.channel_mults:
            raise ValueError("channel_mults must be non-empty")
        stride = 2 ** (len(self.channel_mults) - 1)
        if self.resolution % stride != 0:
            raise ValueError(
                f"resolution {self.resolution} not divisible by downsampling x{stride}")
        for mult in self.channel_mults:
            ch = self.base_channels * mult
            if ch % self.heads != 0:
                raise ValueError(
                    f"channels {ch} not divisible by {self.heads} heads")
        if self.text_dim % 2 != 0:
            raise ValueError("text_dim must be even")

    def level_channels(self) -> list:
        return [self.base_channels * m for m in self.channel_mults]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**{k: tuple(v) if k == "channel_mults" else v for k, v in d.items()})
        cfg.validate()
        return cfg
