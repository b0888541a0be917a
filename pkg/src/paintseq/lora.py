"""Low-rank adapters for attention projections, in two trainable groups.

An adapter attaches a rank-r update ``W' = W + scale * A @ B^T`` to one
attention projection addressed through the model's attention registry.
``B`` starts at zero, so mounting adapters never changes model outputs
until training moves them, and the wrapped base weights are never written.

Adapters split into two groups mirroring the registry: ``spatial`` (self-
and cross-attention projections) and ``temporal``. Fine-tuning runs in two
stages: the spatial group trains on single finished frames (folded to
``f = 1`` at the last frame position, so half-painted intermediate frames
never pull on image quality), then the temporal group trains on complete
sequences to pick up frame ordering. Each stage hash-checks everything it
was not supposed to touch.
"""

import copy
import hashlib
from dataclasses import dataclass

import torch
from torch import nn

from .diffusion import NoiseSchedule, loss_simple, q_sample
from .text import tokenize_batch
from .util import derive_seed, np_rng, torch_generator

DEFAULT_RANK = 8
DEFAULT_SCALE = 1.0
GROUPS = ("spatial", "temporal")


@dataclass
class LoraAdapter:
    """One rank-r update for a named projection weight."""

    name: str
    A: nn.Parameter  # (out_features, r), random-small at init
    B: nn.Parameter  # (in_features, r), zero at init so the update starts null
    r: int
    scale: float
    group: str

    def validate(self) -> None:
        if self.group not in GROUPS:
            raise ValueError(f"unknown adapter group {self.group!r}")
        if self.r < 1:
            raise ValueError("rank must be >= 1")
        if self.A.ndim != 2 or self.B.ndim != 2:
            raise ValueError("A and B must be matrices")
        if self.A.shape[1] != self.r or self.B.shape[1] != self.r:
            raise ValueError(
                f"A and B must have {self.r} columns, got "
                f"A{tuple(self.A.shape)} B{tuple(self.B.shape)}")
        if self.r > min(self.A.shape[0], self.B.shape[0]):
            raise ValueError(
                f"rank {self.r} exceeds min weight dimension "
                f"{min(self.A.shape[0], self.B.shape[0])}")

    def delta(self) -> torch.Tensor:
        """The dense update this adapter adds to its weight."""
        return self.scale * (self.A @ self.B.T)


def make_adapter(name: str, base: nn.Linear, rank: int, scale: float,
                 group: str, seed: int) -> LoraAdapter:
    """Fresh adapter sized for `base`: A random (std 1/sqrt(r)), B zero."""
    m, n = base.weight.shape
    if rank < 1 or rank > min(m, n):
        raise ValueError(
            f"rank {rank} invalid for weight ({m}, {n}); need 1 <= r <= {min(m, n)}")
    gen = torch_generator(derive_seed(seed, "adapter", name))
    A = nn.Parameter(
        torch.randn(m, rank, generator=gen, dtype=base.weight.dtype) * rank ** -0.5)
    B = nn.Parameter(torch.zeros(n, rank, dtype=base.weight.dtype))
    adapter = LoraAdapter(name=name, A=A, B=B, r=rank, scale=scale, group=group)
    adapter.validate()
    return adapter


def effective_weight(W: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    """W' = W + scale * A @ B^T, with strict dimension conformance."""
    if W.ndim != 2:
        raise ValueError("W must be a matrix")
    m, n = W.shape
    if (adapter.A.shape[0] != m or adapter.B.shape[0] != n
            or adapter.A.shape[1] != adapter.B.shape[1]):
        raise ValueError(
            f"adapter dims A{tuple(adapter.A.shape)} B{tuple(adapter.B.shape)} "
            f"do not conform to weight ({m}, {n})")
    return W + adapter.scale * (adapter.A @ adapter.B.T)


class LoraLinear(nn.Module):
    """A frozen Linear plus one mounted adapter on a residual path.

    Forward computes ``base(x) + scale * (x @ B) @ A^T``, which equals a
    Linear carrying `effective_weight`; with B = 0 the extra term is an
    exact zero matrix, so a freshly mounted wrapper is output-identical to
    its base. Wrapping freezes the base parameters and remembers their
    prior requires_grad flags so ejection restores them.
    """

    def __init__(self, base: nn.Linear, adapter: LoraAdapter):
        super().__init__()
        if not isinstance(base, nn.Linear):
            raise TypeError(f"can only wrap nn.Linear, got {type(base).__name__}")
        adapter.validate()
        m, n = base.weight.shape
        if adapter.A.shape[0] != m or adapter.B.shape[0] != n:
            raise ValueError(
                f"adapter {adapter.name!r} dims A{tuple(adapter.A.shape)} "
                f"B{tuple(adapter.B.shape)} do not fit weight ({m}, {n})")
        self.base = base
        self.adapter = adapter
        self.lora_A = adapter.A
        self.lora_B = adapter.B
        self._base_requires_grad = [p.requires_grad for p in base.parameters()]
        for p in base.parameters():
            p.requires_grad_(False)

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.adapter.scale * (x @ self.lora_B) @ self.lora_A.T

    def merged(self) -> nn.Linear:
        """A plain Linear with the adapter folded into the base weight."""
        out = nn.Linear(self.base.in_features, self.base.out_features,
                        bias=self.base.bias is not None)
        with torch.no_grad():
            out.weight.copy_(effective_weight(self.base.weight, self.adapter))
            if self.base.bias is not None:
                out.bias.copy_(self.base.bias)
        return out.to(self.base.weight.dtype)

    def restore(self) -> nn.Linear:
        """Hand back the untouched base Linear, grad flags re-enabled."""
        for p, flag in zip(self.base.parameters(), self._base_requires_grad):
            p.requires_grad_(flag)
        return self.base


def _set_submodule(model: nn.Module, name: str, module: nn.Module) -> None:
    parent_name, _, attr = name.rpartition(".")
    parent = model.get_submodule(parent_name) if parent_name else model
    setattr(parent, attr, module)


def inject(model, group: str, rank: int = DEFAULT_RANK,
           scale: float = DEFAULT_SCALE, seed: int = 0) -> dict:
    """Mount one fresh adapter on every registry projection in `group`.

    Returns {target name: adapter}. Every target gets exactly one adapter;
    a target that already carries one aborts the whole injection.
    """
    if group not in GROUPS:
        raise ValueError(f"unknown adapter group {group!r}; expected one of {GROUPS}")
    registry = model.attention_registry()
    targets = sorted(name for name, g in registry.items() if g == group)
    if not targets:
        raise ValueError(f"model registry has no {group!r} targets")
    for name in targets:
        if isinstance(model.get_submodule(name), LoraLinear):
            raise RuntimeError(f"{name} already has an adapter mounted")
    adapters = {}
    for name in targets:
        base = model.get_submodule(name)
        adapter = make_adapter(name, base, rank, scale, group, seed)
        _set_submodule(model, name, LoraLinear(base, adapter))
        adapters[name] = adapter
    return adapters


def mounted_adapters(model, group: str = None) -> dict:
    """{target name: adapter} for everything currently mounted."""
    out = {}
    for path, module in model.named_modules():
        if isinstance(module, LoraLinear):
            if group is None or module.adapter.group == group:
                out[path] = module.adapter
    return out


def eject(model, group: str = None) -> dict:
    """Unmount adapters (all, or one group); restores the original Linears.

    Base weights were never written while mounted, so post-ejection model
    state is bitwise identical to pre-injection state.
    """
    removed = {}
    for name, adapter in sorted(mounted_adapters(model, group).items()):
        wrapper = model.get_submodule(name)
        _set_submodule(model, name, wrapper.restore())
        removed[name] = adapter
    return removed


def mount_adapters(model, adapters) -> dict:
    """Mount pre-built adapters (e.g. loaded from disk) by target name.

    Every adapter must address a registry projection with its exact group;
    otherwise nothing is mounted and the error lists every missing target.
    """
    adapters = list(adapters.values()) if isinstance(adapters, dict) else list(adapters)
    registry = model.attention_registry()
    missing = sorted(a.name for a in adapters if registry.get(a.name) != a.group)
    if missing:
        raise ValueError(
            "adapter targets missing from model registry: " + ", ".join(missing))
    for a in adapters:
        if isinstance(model.get_submodule(a.name), LoraLinear):
            raise RuntimeError(f"{a.name} already has an adapter mounted")
    mounted = {}
    for a in adapters:
        a.validate()
        base = model.get_submodule(a.name)
        _set_submodule(model, a.name, LoraLinear(base, a))
        mounted[a.name] = a
    return mounted


def fold_adapters(model):
    """A deep copy of `model` with every adapter merged into its weight.

    The copy carries plain Linear layers (no wrappers); the original model
    and its mounted adapters are untouched.
    """
    folded = copy.deepcopy(model)
    for name in sorted(mounted_adapters(folded)):
        wrapper = folded.get_submodule(name)
        _set_submodule(folded, name, wrapper.merged())
    return folded


# ------------------------------------------------------------------ disk IO

def save_adapters(adapters, path) -> None:
    """Write adapters as a list of {name, group, r, scale, A, B} records."""
    if isinstance(adapters, dict):
        adapters = list(adapters.values())
    payload = [{
        "name": a.name,
        "group": a.group,
        "r": int(a.r),
        "scale": float(a.scale),
        "A": a.A.detach().cpu().clone(),
        "B": a.B.detach().cpu().clone(),
    } for a in adapters]
    torch.save({"adapters": payload}, path)


def load_adapters(path) -> list:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    adapters = []
    for rec in payload["adapters"]:
        adapter = LoraAdapter(
            name=rec["name"], A=nn.Parameter(rec["A"]), B=nn.Parameter(rec["B"]),
            r=int(rec["r"]), scale=float(rec["scale"]), group=rec["group"])
        adapter.validate()
        adapters.append(adapter)
    return adapters


# ------------------------------------------------------------- hash guards

def adapter_state_keys(model, group: str) -> set:
    """State-dict keys of the A/B parameters for one mounted group."""
    keys = set()
    for name, module in model.named_modules():
        if isinstance(module, LoraLinear) and module.adapter.group == group:
            keys.add(f"{name}.lora_A")
            keys.add(f"{name}.lora_B")
    return keys


def frozen_state_hash(model, exclude=()) -> str:
    """sha256 over every state entry not excluded; detects frozen drift."""
    h = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        if name in exclude:
            continue
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------- training

@dataclass(frozen=True)
class LoraTrainConfig:
    """Settings for one adapter stage, recorded verbatim in run manifests.

    The optimizer slot is filled by Adam: the stage contract only needs an
    adaptive per-parameter-step-size method that works without per-run
    tuning, and Adam is the stock choice satisfying that.
    """

    steps: int = 200
    lr: float = 1e-2
    batch_size: int = 4
    rank: int = DEFAULT_RANK
    scale: float = DEFAULT_SCALE
    seed: int = 0
    optimizer: str = "adam"
    resample_noise: bool = True

    def to_dict(self) -> dict:
        return {
            "steps": self.steps, "lr": self.lr, "batch_size": self.batch_size,
            "rank": self.rank, "scale": self.scale, "seed": self.seed,
            "optimizer": self.optimizer, "resample_noise": self.resample_noise,
        }


def _window_mean(values, head: bool) -> float:
    k = max(1, min(10, len(values) // 2))
    chunk = values[:k] if head else values[-k:]
    return float(sum(chunk) / len(chunk))


@dataclass
class LoraTrainResult:
    group: str
    adapters: dict
    losses: list
    config: LoraTrainConfig
    frozen_hash: str

    @property
    def loss_start(self) -> float:
        """Mean loss over the first few recorded steps (up to 10)."""
        return _window_mean(self.losses, head=True)

    @property
    def loss_end(self) -> float:
        """Mean loss over the last few recorded steps (up to 10)."""
        return _window_mean(self.losses, head=False)

    def to_manifest(self) -> dict:
        return {
            "group": self.group,
            "targets": sorted(self.adapters),
            "loss_start": self.loss_start,
            "loss_end": self.loss_end,
            "frozen_hash": self.frozen_hash,
            **self.config.to_dict(),
        }


def _train_adapters(model, schedule: NoiseSchedule, latents: torch.Tensor,
                    captions, cfg: LoraTrainConfig, group: str,
                    frame_positions: torch.Tensor) -> LoraTrainResult:
    """Shared stage loop: inject `group`, train only its A/B, hash the rest.

    Leaves the adapters mounted and every other parameter requires_grad
    False, ready for the next stage or for inference.
    """
    if latents.ndim != 5:
        raise ValueError(f"latents must be (n, f, c, h, w), got {latents.ndim}D")
    n = latents.shape[0]
    if n == 0:
        raise ValueError("no training examples")
    if len(captions) != n:
        raise ValueError(f"{n} latents but {len(captions)} captions")
    if cfg.optimizer != "adam":
        raise ValueError(f"unsupported optimizer {cfg.optimizer!r}")
    if cfg.steps < 1:
        raise ValueError("steps must be >= 1")

    adapters = inject(model, group, cfg.rank, cfg.scale,
                      seed=derive_seed(cfg.seed, "init"))

    with torch.no_grad():
        token_ids = tokenize_batch(list(captions), model.config.max_tokens)
        embeddings = model.encode_text(token_ids).to(latents.dtype)

    for p in model.parameters():
        p.requires_grad_(False)
    params = []
    for adapter in adapters.values():
        adapter.A.requires_grad_(True)
        adapter.B.requires_grad_(True)
        params.extend([adapter.A, adapter.B])

    exclude = adapter_state_keys(model, group)
    hash_before = frozen_state_hash(model, exclude)

    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    order = np_rng(derive_seed(cfg.seed, "order"))
    if not cfg.resample_noise:
        # Fixed-probe mode: draw (t, eps) once per example so the stage is a
        # pure regression the adapters can drive toward zero — the shape of
        # an overfit sanity check. Real stages keep resampling enabled.
        gen = torch_generator(derive_seed(cfg.seed, "probe"))
        t_all = torch.randint(0, schedule.T, (n,), generator=gen)
        eps_all = torch.randn(latents.shape, generator=gen, dtype=latents.dtype)
    losses = []
    for step in range(cfg.steps):
        idx = torch.as_tensor(order.integers(0, n, size=cfg.batch_size))
        x0 = latents[idx]
        if cfg.resample_noise:
            gen = torch_generator(derive_seed(cfg.seed, "noise", step))
            t = torch.randint(0, schedule.T, (cfg.batch_size,), generator=gen)
            eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        else:
            t, eps = t_all[idx], eps_all[idx]
        xt = q_sample(x0, t, eps, schedule)
        pred = model(xt, t, embeddings[idx], frame_positions=frame_positions)
        loss = loss_simple(pred, eps)
        if not torch.isfinite(loss):
            raise RuntimeError(f"{group} adapter training diverged at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))

    hash_after = frozen_state_hash(model, exclude)
    if hash_after != hash_before:
        raise AssertionError(
            f"frozen parameters changed during {group} adapter training")
    return LoraTrainResult(group=group, adapters=adapters, losses=losses,
                           config=cfg, frozen_hash=hash_after)


def train_spatial_lora(model, schedule: NoiseSchedule, final_latents: torch.Tensor,
                       captions, cfg: LoraTrainConfig = LoraTrainConfig(),
                       ) -> LoraTrainResult:
    """Stage 1: train spatial-group adapters on finished frames only.

    `final_latents` is (n, c, h, w) — one finished frame per example; each
    is treated as a length-1 sequence sitting at the last frame position,
    so the adapters shape image quality without ever seeing the
    half-painted frames that precede it. Base weights and the temporal
    blocks stay frozen (hash-checked).
    """
    if final_latents.ndim != 4:
        raise ValueError(
            f"final_latents must be (n, c, h, w) single frames, got "
            f"{final_latents.ndim}D")
    positions = torch.tensor([model.config.f - 1])
    return _train_adapters(model, schedule, final_latents.unsqueeze(1),
                           captions, cfg, "spatial", positions)


def train_temporal_lora(model, schedule: NoiseSchedule,
                        sequence_latents: torch.Tensor, captions,
                        cfg: LoraTrainConfig = LoraTrainConfig(),
                        ) -> LoraTrainResult:
    """Stage 2: train temporal-group adapters on complete sequences.

    Requires the spatial adapters from stage 1 to be mounted; they stay
    frozen along with every base weight (hash-checked). Only the temporal
    A/B matrices move, which is what lets the stage absorb frame ordering
    without touching per-frame appearance.
    """
    if sequence_latents.ndim != 5:
        raise ValueError(
            f"sequence_latents must be (n, f, c, h, w), got "
            f"{sequence_latents.ndim}D")
    if not mounted_adapters(model, "spatial"):
        raise RuntimeError(
            "temporal adapter stage requires spatial adapters mounted first")
    positions = torch.arange(sequence_latents.shape[1])
    return _train_adapters(model, schedule, sequence_latents, captions, cfg,
                           "temporal", positions)
