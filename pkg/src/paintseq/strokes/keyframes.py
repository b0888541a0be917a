"""Non-uniform keyframe selection from a full painting sequence."""

from .types import PaintingSequence


def keyframe_indices(n: int, f: int, gamma: float) -> list:
    """Power-law spaced 1-based indices into a length-n sequence.

    i_k = round(n * (k/f)^gamma) for k = 1..f, deduplicated upward so the
    f indices are strictly increasing, with i_f pinned to n. Early frames
    cluster when gamma > 1, matching the fast-changing start of a painting.
    """
    if f < 1:
        raise ValueError("f must be >= 1")
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    if n < f:
        raise ValueError(f"cannot select {f} keyframes from {n} frames")
    indices = []
    prev = 0
    for k in range(1, f + 1):
        raw = int(n * (k / f) ** gamma + 0.5)
        # Leave room for the remaining f-k indices below n.
        cap = n - (f - k)
        idx = max(1, min(raw, cap), prev + 1)
        indices.append(idx)
        prev = idx
    assert indices[-1] == n
    return indices


def sample_keyframes(
    full_sequence: list,
    f: int,
    gamma: float = 2.0,
    caption: str = "",
    strategy: str = "coarse_to_fine",
    seed: int = 0,
) -> PaintingSequence:
    """Select f keyframes from the full stroke-by-stroke sequence.

    The last element is always included as the final frame.
    """
    idx = keyframe_indices(len(full_sequence), f, gamma)
    frames = [full_sequence[i - 1] for i in idx]
    return PaintingSequence(frames=frames, caption=caption, strategy=strategy, seed=seed)
