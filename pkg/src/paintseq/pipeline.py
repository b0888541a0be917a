"""Training-stage orchestration and the three sequence-generation tasks.

The package trains in stages — full pretraining of the sequence denoiser,
then the conditioning network against the frozen base, then the two adapter
groups — and generates in three modes: prompt-only, reference-image
reconstruction, and completion of a semi-finished frame. This module owns
the run-directory plumbing (manifests, checkpoints, sample exports), the
shared conditioned sampler the tasks are built on, and the stage wrappers
the command line calls.

Every run writes a ``runs/<run_id>/`` directory holding ``manifest.json``
plus the stage's artifacts, so any checkpoint or sample can be traced back
to the exact seeds and hyperparameters that produced it.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from .arn import ArnModel, ArnTrainConfig, FrameCondition, make_arn_input, save_arn, train_arn
from .codec import canvases_to_tensor, tensor_to_canvases
from .diffusion import (
    NoiseSchedule,
    ddim_invert,
    ddim_timesteps,
    loss_simple,
    q_sample,
)
from .lora import (
    LoraTrainConfig,
    save_adapters,
    train_spatial_lora,
    train_temporal_lora,
)
from .model.config import ModelConfig
from .model.unet import SequenceUNet, save_model_checkpoint
from .text import UNK_ID, tokenize, tokenize_batch
from .util import derive_seed, np_rng, tensor_hash, torch_generator

STAGES = ("codec", "pretrain", "arn", "lora-spatial", "lora-temporal")


# --------------------------------------------------------------------------
# run manifests
# --------------------------------------------------------------------------


def dataset_fingerprint(latents: torch.Tensor, captions: list) -> str:
    """Stable identity of a (latents, captions) training set."""
    h = hashlib.sha256()
    h.update(tensor_hash(latents).encode())
    for cap in captions:
        h.update(b"\x00")
        h.update(cap.encode())
    return h.hexdigest()


@dataclass
class RunManifest:
    """Reproducibility record: what ran, on what data, with which knobs."""

    run_id: str
    stage: str
    seeds: dict
    hyperparameters: dict
    dataset_fingerprint: str
    config_hash: str = ""
    created: str = ""

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if not self.config_hash:
            self.config_hash = self._hash()
        if not self.created:
            self.created = datetime.now(timezone.utc).isoformat()

    def _hash(self) -> str:
        body = json.dumps(
            {
                "stage": self.stage,
                "seeds": self.seeds,
                "hyperparameters": self.hyperparameters,
                "dataset_fingerprint": self.dataset_fingerprint,
            },
            sort_keys=True,
        )
        return hashlib.sha256(body.encode()).hexdigest()

    def save(self, run_dir) -> Path:
        path = Path(run_dir) / "manifest.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        manifest = cls(**data)
        if manifest._hash() != manifest.config_hash:
            raise ValueError("manifest config_hash does not match its contents")
        return manifest


def make_run_dir(root, stage: str, config_hash: str, run_id: str = None) -> Path:
    """Create runs/<run_id>/ (with samples/) under `root` and return it."""
    if run_id is None:
        run_id = f"{stage}-{config_hash[:10]}"
    run_dir = Path(root) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "samples").mkdir(exist_ok=True)
    return run_dir


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    """Joint full-parameter training of the sequence denoiser.

    Defaults keep the source recipe's learning rate and batch size and scale
    only the step count down to desk size; small from-scratch runs override
    the learning rate explicitly.
    """

    steps: int = 20000
    lr: float = 2e-5
    batch_size: int = 1
    seed: int = 0
    ckpt_every: int = 1000

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.ckpt_every < 1:
            raise ValueError("ckpt_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PretrainResult:
    model: SequenceUNet
    losses: list
    probe_loss_start: float
    probe_loss_end: float
    ckpt_path: Path
    manifest: RunManifest


def _probe_batch(latents, tokens, schedule, seed):
    """A fixed (x_t, t, eps) batch used to read training progress."""
    n = min(8, latents.shape[0])
    gen = torch_generator(derive_seed(seed, "probe"))
    t = torch.randint(0, schedule.T, (n,), generator=gen)
    eps = torch.randn(latents[:n].shape, generator=gen)
    xt = q_sample(latents[:n], t, eps, schedule)
    return xt, t, eps, tokens[:n]


def _probe_loss(model, probe) -> float:
    xt, t, eps, tokens = probe
    with torch.no_grad():
        emb = model.encode_text(tokens)
        pred = model(xt, t, emb)
    return float(loss_simple(pred, eps))


def pretrain_painting_model(
    latents: torch.Tensor,
    captions: list,
    model: SequenceUNet,
    schedule: NoiseSchedule,
    cfg: PretrainConfig,
    run_root=None,
    resume_from=None,
) -> PretrainResult:
    """Train every parameter of `model` (text encoder included) on full
    sequences, checkpointing periodically into a run directory.

    Resuming restores model weights, optimizer state, and the step counter
    from a checkpoint written by a previous (interrupted or shorter) run
    with the same configuration.
    """
    cfg.validate()
    if latents.dim() != 5:
        raise ValueError(f"latents must be (n, f, c, h, w), got {tuple(latents.shape)}")
    n = latents.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    if len(captions) != n:
        raise ValueError(f"{n} sequences but {len(captions)} captions")
    if latents.shape[1] != model.config.f:
        raise ValueError(
            f"sequences have f={latents.shape[1]} frames but the model expects "
            f"f={model.config.f}")

    manifest = RunManifest(
        run_id="",
        stage="pretrain",
        seeds={"train": cfg.seed},
        hyperparameters=cfg.to_dict(),
        dataset_fingerprint=dataset_fingerprint(latents, captions),
    )
    manifest.run_id = f"pretrain-{manifest.config_hash[:10]}"

    tokens = tokenize_batch(captions, model.config.max_tokens)
    probe = _probe_batch(latents, tokens, schedule, cfg.seed)
    probe_start = _probe_loss(model, probe)

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    start_step = 0
    losses = []
    if resume_from is not None:
        payload = torch.load(resume_from, map_location="cpu", weights_only=False)
        ckpt_config = ModelConfig.from_dict(payload["config"])
        if ckpt_config != model.config:
            raise ValueError(
                f"checkpoint config {ckpt_config} does not match the model's "
                f"{model.config}")
        model.load_state_dict(payload["state_dict"])
        extra = payload.get("extra", {})
        opt.load_state_dict(extra["optimizer"])
        start_step = extra["step"]
        losses = list(extra.get("losses", []))
        probe_start = extra.get("probe_loss_start", probe_start)

    run_dir = None
    ckpt_path = None
    if run_root is not None:
        run_dir = make_run_dir(run_root, "pretrain", manifest.config_hash,
                               run_id=manifest.run_id)
        manifest.save(run_dir)
        ckpt_path = run_dir / "model.ckpt"

    order = np_rng(derive_seed(cfg.seed, "order"))
    # fast-forward the draw stream so a resumed run continues the same data order
    for _ in range(start_step):
        order.integers(0, n, size=cfg.batch_size)

    model.train()
    for step in range(start_step, cfg.steps):
        idx = torch.as_tensor(order.integers(0, n, size=cfg.batch_size))
        gen = torch_generator(derive_seed(cfg.seed, "noise", step))
        t = torch.randint(0, schedule.T, (cfg.batch_size,), generator=gen)
        eps = torch.randn(latents[idx].shape, generator=gen)
        xt = q_sample(latents[idx], t, eps, schedule)
        emb = model.encode_text(tokens[idx])
        loss = loss_simple(model(xt, t, emb), eps)
        if not torch.isfinite(loss):
            raise RuntimeError(f"pretraining diverged at step {step} (non-finite loss)")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if ckpt_path is not None and ((step + 1) % cfg.ckpt_every == 0
                                      or step + 1 == cfg.steps):
            save_model_checkpoint(model, ckpt_path, extra={
                "optimizer": opt.state_dict(),
                "step": step + 1,
                "losses": losses,
                "probe_loss_start": probe_start,
                "manifest": asdict(manifest),
            })
    model.eval()
    probe_end = _probe_loss(model, probe)
    if ckpt_path is None and run_root is None:
        ckpt_path = Path("")  # no artifact requested
    return PretrainResult(model=model, losses=losses, probe_loss_start=probe_start,
                          probe_loss_end=probe_end, ckpt_path=ckpt_path,
                          manifest=manifest)


# --------------------------------------------------------------------------
# stage wrappers (ARN / adapters) — run-dir plumbing around the trainers
# --------------------------------------------------------------------------


def run_arn_stage(model, arn, schedule, latents, captions, cfg: ArnTrainConfig,
                  run_root) -> tuple:
    """Train the conditioning network and persist it with a manifest."""
    result = train_arn(model, arn, schedule, latents, captions, cfg)
    manifest = RunManifest(
        run_id="",
        stage="arn",
        seeds={"train": cfg.seed},
        hyperparameters=cfg.to_dict(),
        dataset_fingerprint=dataset_fingerprint(latents, captions),
    )
    manifest.run_id = f"arn-{manifest.config_hash[:10]}"
    run_dir = make_run_dir(run_root, "arn", manifest.config_hash, run_id=manifest.run_id)
    manifest.save(run_dir)
    save_arn(arn, run_dir / "arn.ckpt")
    return result, manifest, run_dir


def run_lora_stage(group: str, model, schedule, latents, captions,
                   cfg: LoraTrainConfig, run_root) -> tuple:
    """Train one adapter group and persist the adapters with a manifest."""
    if group == "spatial":
        result = train_spatial_lora(model, schedule, latents, captions, cfg)
    elif group == "temporal":
        result = train_temporal_lora(model, schedule, latents, captions, cfg)
    else:
        raise ValueError(f"unknown adapter group {group!r}")
    manifest = RunManifest(
        run_id="",
        stage=f"lora-{group}",
        seeds={"train": cfg.seed},
        hyperparameters=cfg.to_dict(),
        dataset_fingerprint=dataset_fingerprint(latents, captions),
    )
    manifest.run_id = f"lora-{group}-{manifest.config_hash[:10]}"
    run_dir = make_run_dir(run_root, f"lora-{group}", manifest.config_hash,
                           run_id=manifest.run_id)
    manifest.save(run_dir)
    save_adapters(result.adapters, run_dir / f"lora_{group}.ckpt")
    return result, manifest, run_dir


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleConfig:
    """Knobs for sequence generation.

    steps:           DDIM grid size (50 matches the source recipe).
    eta:             0 keeps the sampler deterministic.
    clip_x0:         clamp for per-step x0 estimates; None disables.
    fusion_lambda:   conditioning feature weight; None uses the network's own.
    replace_depth:   fraction of the schedule at which the inverted reference
                     enters the trajectory. 1.0 substitutes the initial noise
                     itself; smaller values splice the reference in later,
                     trading generative freedom for reconstruction fidelity —
                     an imperfect denoiser loses most of the reference in the
                     high-t segment, so small models want depth well below 1.
    use_conditioning_net / use_noise_replacement: ablation toggles for the
                     two conditioning mechanisms.
    """

    steps: int = 50
    eta: float = 0.0
    clip_x0: float = 1.0
    fusion_lambda: float = None
    replace_depth: float = 1.0
    use_conditioning_net: bool = True
    use_noise_replacement: bool = True

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.clip_x0 is not None and self.clip_x0 <= 0:
            raise ValueError("clip_x0 must be positive or None")
        if not (0.0 < self.replace_depth <= 1.0):
            raise ValueError("replace_depth must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GeneratedSequence:
    """Decoded output of one generation task."""

    frames: list  # list[Canvas] (H, W, 3) float in [0, 1], paint order
    prompt: str
    seed: int
    latents: torch.Tensor  # (f, c, h, w) final latent trajectory state

    @property
    def f(self) -> int:
        return len(self.frames)


def replacement_timestep(schedule: NoiseSchedule, steps: int, depth: float) -> int:
    """The DDIM grid timestep at which a depth-fraction replacement lands."""
    target = round(depth * (schedule.T - 1))
    grid = [t for t in ddim_timesteps(schedule.T, steps) if t <= target]
    if not grid:
        raise ValueError(f"replace_depth {depth} lies below the sampling grid")
    return grid[-1]


@torch.no_grad()
def sample_sequence(
    model: SequenceUNet,
    schedule: NoiseSchedule,
    text_emb: torch.Tensor,
    n_samples: int,
    seed: int,
    cfg: SampleConfig = SampleConfig(),
    arn: ArnModel = None,
    conditions: list = None,
    anchors: dict = None,
) -> torch.Tensor:
    """DDIM-sample (n, f, c, h, w) latent sequences.

    `conditions` is a per-sample list of FrameCondition lists consumed by the
    conditioning network; `anchors` maps a frame index to an (n, c, h, w)
    latent state spliced into that frame's slot when the trajectory crosses
    ``replace_depth`` (at depth 1.0 that is the initial noise itself).
    """
    cfg.validate()
    mc = model.config
    if text_emb.shape[0] != n_samples:
        raise ValueError(f"{n_samples} samples but text_emb batch {text_emb.shape[0]}")
    shape = (n_samples, mc.f, mc.in_channels, mc.resolution, mc.resolution)
    x = torch.randn(shape, generator=torch_generator(derive_seed(seed, "init-noise")))

    use_arn = arn is not None and cfg.use_conditioning_net and conditions is not None
    stack = None
    lam = cfg.fusion_lambda
    if use_arn:
        if len(conditions) != n_samples:
            raise ValueError(f"{n_samples} samples but {len(conditions)} condition lists")
        stack = torch.stack([
            make_arn_input(mc.f, conditions[j], derive_seed(seed, "stack", j),
                           mc.in_channels, mc.resolution)
            for j in range(n_samples)
        ])
        if lam is None:
            lam = arn.config.fusion_lambda

    anchors = dict(anchors or {}) if cfg.use_noise_replacement else {}
    for tau in anchors:
        if not (0 <= tau < mc.f):
            raise ValueError(f"anchor frame {tau} out of range for f={mc.f}")
    t_replace = None
    if anchors:
        t_replace = replacement_timestep(schedule, cfg.steps, cfg.replace_depth)

    ts = ddim_timesteps(schedule.T, cfg.steps)
    noise_gen = torch_generator(derive_seed(seed, "eta-noise")) if cfg.eta > 0 else None
    replaced = not anchors
    for i in range(len(ts) - 1, -1, -1):
        t = ts[i]
        if not replaced and t <= t_replace:
            x = x.clone()
            for tau, state in anchors.items():
                x[:, tau] = state
            replaced = True
        ab_t = float(schedule.alpha_bar[t])
        ab_prev = float(schedule.alpha_bar[ts[i - 1]]) if i > 0 else 1.0
        tb = torch.full((n_samples,), t, dtype=torch.long)
        if use_arn:
            feats = arn(stack, tb, text_emb)
            eps = model(x, tb, text_emb, arn_features=feats, fusion_lambda=lam)
        else:
            eps = model(x, tb, text_emb)
        x0_est = (x - (1.0 - ab_t) ** 0.5 * eps) / ab_t ** 0.5
        if cfg.clip_x0 is not None:
            x0_est = x0_est.clamp(-cfg.clip_x0, cfg.clip_x0)
        if cfg.eta > 0.0 and i > 0:
            sigma = cfg.eta * ((1.0 - ab_prev) / (1.0 - ab_t)
                               * (1.0 - ab_t / ab_prev)) ** 0.5
            dir_coeff = max(1.0 - ab_prev - sigma ** 2, 0.0) ** 0.5
            noise = torch.randn(x.shape, generator=noise_gen, dtype=x.dtype)
            x = ab_prev ** 0.5 * x0_est + dir_coeff * eps + sigma * noise
        else:
            x = ab_prev ** 0.5 * x0_est + (1.0 - ab_prev) ** 0.5 * eps
    return x


def invert_reference(
    model: SequenceUNet,
    schedule: NoiseSchedule,
    ref_latent: torch.Tensor,
    text_emb: torch.Tensor,
    position: int,
    cfg: SampleConfig,
) -> torch.Tensor:
    """DDIM-invert one reference latent to the trajectory's re-entry depth.

    The reference is treated as a single-frame sequence pinned to its frame
    position so the temporal layers see the right index embedding.
    """
    x0 = ref_latent.unsqueeze(0).unsqueeze(0)  # (1, 1, c, h, w)
    fp = torch.tensor([position])
    t_stop = replacement_timestep(schedule, cfg.steps, cfg.replace_depth)
    inv = ddim_invert(
        lambda x, t, c: model(x, t, c, frame_positions=fp),
        x0, text_emb[:1], schedule, cfg.steps, t_stop=t_stop)
    return inv[0, 0]


# --------------------------------------------------------------------------
# generation tasks
# --------------------------------------------------------------------------


def _warn_unknown_tokens(prompt: str) -> None:
    # a word is unknown exactly when the tokenizer maps it to UNK
    unknown = [w for w in prompt.split() if tokenize(w, max_tokens=1) == [UNK_ID]]
    if unknown:
        warnings.warn(
            f"prompt words not in vocabulary, mapped to UNK: {unknown}",
            stacklevel=3)


def _embed_prompt(model: SequenceUNet, prompt: str, n: int) -> torch.Tensor:
    _warn_unknown_tokens(prompt)
    tokens = tokenize_batch([prompt] * n, model.config.max_tokens)
    with torch.no_grad():
        return model.encode_text(tokens).float()


def _encode_reference(model: SequenceUNet, codec, ref_image) -> torch.Tensor:
    """Canvas (H, W, 3) in [0, 1] -> codec latent (c, h, w), validated."""
    ref = np.asarray(ref_image)
    if ref.ndim != 3 or ref.shape[2] != 3:
        raise ValueError(f"reference image must be (H, W, 3), got {ref.shape}")
    if ref.shape[0] != model.config.resolution or ref.shape[1] != model.config.resolution:
        raise ValueError(
            f"reference resolution {ref.shape[0]}x{ref.shape[1]} does not match "
            f"the model's {model.config.resolution}x{model.config.resolution}")
    images = canvases_to_tensor([ref], dtype=torch.float32)
    images = codec.normalize(images) if hasattr(codec, "normalize") else images
    with torch.no_grad():
        return codec.encode(images)[0]


def _decode_sequence(codec, latents: torch.Tensor, prompt: str, seed: int
                     ) -> GeneratedSequence:
    with torch.no_grad():
        frames = codec.decode(latents.float())
    return GeneratedSequence(frames=tensor_to_canvases(frames), prompt=prompt,
                             seed=seed, latents=latents)


def text2painting(
    model: SequenceUNet,
    schedule: NoiseSchedule,
    codec,
    prompt: str,
    n_samples: int,
    seed: int,
    cfg: SampleConfig = SampleConfig(),
) -> list:
    """Prompt-only generation: each sample is an f-frame painting process
    sampled from per-frame independent noise, with no conditioning network."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    emb = _embed_prompt(model, prompt, n_samples)
    latents = sample_sequence(model, schedule, emb, n_samples, seed, cfg)
    return [_decode_sequence(codec, latents[j], prompt, seed)
            for j in range(n_samples)]


def image2painting(
    model: SequenceUNet,
    arn: ArnModel,
    schedule: NoiseSchedule,
    codec,
    ref_image,
    prompt: str = "",
    seed: int = 0,
    cfg: SampleConfig = SampleConfig(),
) -> GeneratedSequence:
    """Reconstruct a painting process that ends at the reference image.

    The reference conditions the final frame (both through the conditioning
    network's feature stream and by splicing its partially inverted latent
    into the final frame's slot), while earlier frames are generated as the
    steps that would have led there. An empty prompt is allowed.
    """
    tau = model.config.f - 1
    emb = _embed_prompt(model, prompt, 1)
    l_i = _encode_reference(model, codec, ref_image)
    conditions = [[FrameCondition(tau=tau, ref_latent=l_i)]]
    anchors = {}
    if cfg.use_noise_replacement:
        anchors[tau] = invert_reference(model, schedule, l_i, emb, tau,
                                        cfg).unsqueeze(0)
    latents = sample_sequence(model, schedule, emb, 1, seed, cfg, arn=arn,
                              conditions=conditions, anchors=anchors)
    return _decode_sequence(codec, latents[0], prompt, seed)


def semi2complete(
    model: SequenceUNet,
    arn: ArnModel,
    schedule: NoiseSchedule,
    codec,
    ref_image,
    tau: int,
    prompt: str = "",
    seed: int = 0,
    cfg: SampleConfig = SampleConfig(),
) -> GeneratedSequence:
    """Continue a semi-finished painting: frame `tau` is pinned to the
    reference and the remaining frames carry the process to completion under
    the prompt. The final-frame position is reserved for image2painting."""
    f = model.config.f
    if not 0 <= tau < f - 1:
        raise ValueError(
            f"tau must lie in [0, {f - 2}] for completion; tau={f - 1} is the "
            f"final frame, which is the image2painting task")
    emb = _embed_prompt(model, prompt, 1)
    l_i = _encode_reference(model, codec, ref_image)
    conditions = [[FrameCondition(tau=tau, ref_latent=l_i)]]
    anchors = {}
    if cfg.use_noise_replacement:
        anchors[tau] = invert_reference(model, schedule, l_i, emb, tau,
                                        cfg).unsqueeze(0)
    latents = sample_sequence(model, schedule, emb, 1, seed, cfg, arn=arn,
                              conditions=conditions, anchors=anchors)
    return _decode_sequence(codec, latents[0], prompt, seed)


# --------------------------------------------------------------------------
# sample export
# --------------------------------------------------------------------------


def save_sequence_outputs(seq: GeneratedSequence, out_dir) -> dict:
    """Write per-frame PNGs and an animated GIF for one generated sequence."""
    from .evalkit import export_gif
    from .strokes.dataset import write_frame_png

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame_paths = []
    for k, frame in enumerate(seq.frames):
        path = out_dir / f"frame_{k:02d}.png"
        write_frame_png(frame, path)
        frame_paths.append(path)
    gif = export_gif(seq, out_dir / "process.gif")
    return {"frames": frame_paths, "gif": Path(gif.gif_path),
            "sheet": Path(gif.sheet_path)}
