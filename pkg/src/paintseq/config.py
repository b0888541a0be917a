"""Single config document driving every command-line workflow.

One JSON file holds every tunable knob, grouped by the module that consumes
it. Loading fills omitted keys with defaults and rejects keys that no module
defines, so a typo fails loudly instead of silently training with a default.
"""

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .arn import ARNConfig, ArnTrainConfig
from .codec import CodecConfig
from .diffusion import NoiseSchedule, make_schedule
from .lora import LoraTrainConfig
from .model import ModelConfig
from .pipeline import PretrainConfig, SampleConfig

__all__ = ["ConfigError", "ConfigFile", "default_sections"]


class ConfigError(ValueError):
    """A config document is malformed or names unknown keys."""


# Every knob a workflow can touch, with its stock value. `None` marks
# optional artifact paths that the relevant command requires at use time.
_DEFAULTS = {
    "data": {
        "n": 64,
        "strategy_mix": {
            "coarse_to_fine": 1.0,
            "raster_order": 1.0,
            "depth_order": 1.0,
        },
        "resolution": 64,
        "frames": 8,
        "gamma": 2.0,
        "seed": 0,
        "out_dir": "runs/data",
    },
    "codec": {
        "mode": "identity",
        "downsample_factor": 1,
        "latent_channels": 3,
        "width": 48,
        "epochs": 120,
        "lr": 3e-3,
        "lr_min": 5e-4,
        "batch_size": 16,
        "seed": 0,
        "ckpt": None,
    },
    "model": {
        "resolution": 64,
        "in_channels": 3,
        "base_channels": 64,
        "channel_mults": [1, 2, 4],
        "num_res_blocks": 2,
        "f": 8,
        "text_dim": 128,
        "heads": 4,
        "max_tokens": 16,
        "init_seed": 0,
    },
    "arn": {
        "fusion_lambda": 1.0,
        "zero_init": True,
        "steps": 200,
        "lr": 3e-3,
        "batch_size": 4,
        "seed": 0,
        "k_max": 3,
        "optimizer": "adam",
        "base_ckpt": None,
    },
    "lora": {
        "rank": 8,
        "scale": 1.0,
        "steps": 200,
        "lr": 1e-2,
        "batch_size": 4,
        "seed": 0,
        "optimizer": "adam",
        "resample_noise": True,
        "base_ckpt": None,
        "spatial_ckpt": None,
    },
    "train": {
        "steps": 20000,
        "lr": 2e-5,
        "batch_size": 1,
        "seed": 0,
        "ckpt_every": 1000,
        "run_root": "runs",
        "schedule_timesteps": 1000,
        "schedule_beta_start": 1e-4,
        "schedule_beta_end": 0.02,
    },
    "infer": {
        "steps": 50,
        "eta": 0.0,
        "clip_x0": 1.0,
        "fusion_lambda": None,
        "replace_depth": 1.0,
        "use_conditioning_net": True,
        "use_noise_replacement": True,
        "n_samples": 1,
        "seed": 0,
        "out_dir": "runs/samples",
        "ckpt": None,
        "arn_ckpt": None,
        "lora_spatial_ckpt": None,
        "lora_temporal_ckpt": None,
    },
    "eval": {
        "classifier_seed": 0,
        "probe_seed": 0,
        "gif_seconds": 5.0,
    },
}


def default_sections() -> dict:
    """Deep copy of the full default document."""
    return copy.deepcopy(_DEFAULTS)


def _unknown_keys(doc: dict) -> list:
    bad = []
    for section, payload in doc.items():
        if section not in _DEFAULTS:
            bad.append(section)
            continue
        if not isinstance(payload, dict):
            continue  # reported as a type error separately
        for key in payload:
            if key not in _DEFAULTS[section]:
                bad.append(f"{section}.{key}")
    return sorted(bad)


@dataclass
class ConfigFile:
    """Fully-defaulted view of one config document.

    `sections` always contains every section and every key; user documents
    are overlays. Use the typed accessors to hand sections to the modules
    that consume them.
    """

    sections: dict

    @classmethod
    def defaults(cls) -> "ConfigFile":
        return cls(sections=default_sections())

    @classmethod
    def from_dict(cls, doc: dict) -> "ConfigFile":
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        bad = _unknown_keys(doc)
        if bad:
            raise ConfigError(f"unknown config keys: {', '.join(bad)}")
        merged = default_sections()
        for section, payload in doc.items():
            if not isinstance(payload, dict):
                raise ConfigError(
                    f"config section {section!r} must be an object")
            merged[section].update(payload)
        return cls(sections=merged)

    @classmethod
    def load(cls, path) -> "ConfigFile":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.sections)

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.sections, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    # ------------------------------------------------------------------
    # typed accessors

    def model_config(self) -> ModelConfig:
        m = self.sections["model"]
        cfg = ModelConfig(
            resolution=m["resolution"],
            in_channels=m["in_channels"],
            base_channels=m["base_channels"],
            channel_mults=tuple(m["channel_mults"]),
            num_res_blocks=m["num_res_blocks"],
            f=m["f"],
            text_dim=m["text_dim"],
            heads=m["heads"],
            max_tokens=m["max_tokens"],
        )
        cfg.validate()
        return cfg

    def schedule(self) -> NoiseSchedule:
        t = self.sections["train"]
        return make_schedule(
            T=t["schedule_timesteps"],
            beta_start=t["schedule_beta_start"],
            beta_end=t["schedule_beta_end"],
        )

    def codec_config(self) -> CodecConfig:
        c = self.sections["codec"]
        cfg = CodecConfig(
            mode=c["mode"],
            downsample_factor=c["downsample_factor"],
            latent_channels=c["latent_channels"],
        )
        cfg.validate()
        return cfg

    def pretrain_config(self) -> PretrainConfig:
        t = self.sections["train"]
        cfg = PretrainConfig(
            steps=t["steps"],
            lr=t["lr"],
            batch_size=t["batch_size"],
            seed=t["seed"],
            ckpt_every=t["ckpt_every"],
        )
        cfg.validate()
        return cfg

    def arn_config(self) -> ARNConfig:
        a = self.sections["arn"]
        cfg = ARNConfig(fusion_lambda=a["fusion_lambda"],
                        zero_init=a["zero_init"])
        cfg.validate()
        return cfg

    def arn_train_config(self) -> ArnTrainConfig:
        a = self.sections["arn"]
        return ArnTrainConfig(
            steps=a["steps"],
            lr=a["lr"],
            batch_size=a["batch_size"],
            seed=a["seed"],
            k_max=a["k_max"],
            optimizer=a["optimizer"],
        )

    def lora_train_config(self) -> LoraTrainConfig:
        lo = self.sections["lora"]
        return LoraTrainConfig(
            steps=lo["steps"],
            lr=lo["lr"],
            batch_size=lo["batch_size"],
            rank=lo["rank"],
            scale=lo["scale"],
            seed=lo["seed"],
            optimizer=lo["optimizer"],
            resample_noise=lo["resample_noise"],
        )

    def sample_config(self, **overrides) -> SampleConfig:
        i = dict(self.sections["infer"])
        i.update({k: v for k, v in overrides.items() if v is not None})
        cfg = SampleConfig(
            steps=i["steps"],
            eta=i["eta"],
            clip_x0=i["clip_x0"],
            fusion_lambda=i["fusion_lambda"],
            replace_depth=i["replace_depth"],
            use_conditioning_net=i["use_conditioning_net"],
            use_noise_replacement=i["use_noise_replacement"],
        )
        cfg.validate()
        return cfg
