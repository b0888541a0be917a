"""Determinism and hashing helpers shared across modules."""

import hashlib
import os

import numpy as np
import torch

DETERMINISTIC_ENV = "PAINTSEQ_DETERMINISTIC"


def deterministic_mode_enabled() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "") not in ("", "0")


def apply_deterministic_mode() -> None:
    """Pin torch to deterministic kernels when PAINTSEQ_DETERMINISTIC is set.

    Single-threading matters as much as the kernel choice: multi-threaded
    reductions change summation order between runs with different thread
    counts, which breaks bitwise reproducibility of training and sampling.
    """
    if deterministic_mode_enabled():
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def derive_seed(base: int, *parts) -> int:
    """Stable sub-seed from a base seed and arbitrary labels.

    Uses blake2b rather than hash() so results are identical across
    processes and Python versions.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base)).encode())
    for p in parts:
        h.update(b"/")
        h.update(str(p).encode())
    return int.from_bytes(h.digest(), "little") & 0x7FFFFFFF


def np_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed))
    return g


def state_dict_hash(module: torch.nn.Module) -> str:
    """sha256 over all parameters and buffers; order-stable via sorted names."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state.keys()):
        h.update(name.encode())
        t = state[name]
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def tensor_hash(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()
