"""Session-wide fixtures shared by the training-heavy test modules.

The adapter and conditioning-network suites both need a denoiser whose
attention layers carry real signal (adapters have almost no leverage on a
random network, and inversion-based conditioning needs a generalizing noise
predictor). Building that backbone takes ~2 minutes of CPU training, so one
session-scoped copy is shared; tests that mutate it must deepcopy first,
and a teardown hash guards against accidental in-place training.
"""

import pytest
import torch

from paintseq.arn import ARNConfig, ArnTrainConfig, build_arn, train_arn
from paintseq.codec import IdentityCodec, canvases_to_tensor
from paintseq.diffusion import loss_simple, make_schedule, q_sample
from paintseq.model.config import ModelConfig
from paintseq.model.unet import SequenceUNet
from paintseq.strokes.dataset import generate_sequence
from paintseq.text import tokenize_batch
from paintseq.util import derive_seed, np_rng, state_dict_hash, torch_generator

SMALL = ModelConfig(resolution=16, in_channels=3, base_channels=8,
                    channel_mults=(1, 2), num_res_blocks=1, f=4,
                    text_dim=16, heads=2, max_tokens=8)

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def schedule():
    return make_schedule()


@pytest.fixture(scope="session")
def micro_corpus():
    """16 desk-scale sequences: latents (16, 4, 3, 16, 16) and captions.

    The first 12 are the pretraining set; the last 4 stay held out for
    adaptation and conditioning oracles.
    """
    seqs = [generate_sequence(["raster_order", "depth_order"][i % 2], 16, 4,
                              derive_seed(31, "lora", i)) for i in range(16)]
    codec = IdentityCodec()
    latents = torch.stack([
        codec.encode(canvases_to_tensor(s.frames, dtype=torch.float32))
        for s in seqs])
    return latents, [s.caption for s in seqs]


@pytest.fixture(scope="session")
def micro_base(micro_corpus, schedule):
    """Denoiser pretrained 800 steps with resampled noise on 12 sequences.

    Resampling a fresh (t, eps) pair every step makes the model a real
    noise predictor rather than a lookup table for a fixed probe, which the
    inversion and conditioning oracles depend on. Shared across test
    modules; mutate only deep copies.
    """
    latents, captions = micro_corpus
    torch.manual_seed(0)
    model = SequenceUNet(SMALL)
    with torch.no_grad():
        emb = model.encode_text(
            tokenize_batch(captions, SMALL.max_tokens)).float()
    opt = torch.optim.Adam(model.parameters(), lr=5e-3)
    order = np_rng(derive_seed(0, "pretrain-order"))
    loss = None
    for step in range(800):
        idx = torch.as_tensor(order.integers(0, 12, size=6))
        gen = torch_generator(derive_seed(0, "pretrain-noise", step))
        t = torch.randint(0, schedule.T, (6,), generator=gen)
        eps = torch.randn(latents[idx].shape, generator=gen)
        xt = q_sample(latents[idx], t, eps, schedule)
        loss = loss_simple(model(xt, t, emb[idx]), eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert float(loss.detach()) < 0.2
    model.eval()
    guard = state_dict_hash(model)
    yield model
    assert state_dict_hash(model) == guard, (
        "a test mutated the shared pretrained base in place; deepcopy it")


@pytest.fixture(scope="session")
def arn_corpus():
    """64 sequences, disjoint from the base's pretraining corpus.

    The conditioning task pairs each sample with its own frames as
    references, so it needs more diversity than the base saw to learn an
    injection rule instead of memorizing targets.
    """
    codec = IdentityCodec()
    seqs = [generate_sequence(["raster_order", "depth_order"][i % 2], 16, 4,
                              derive_seed(53, "arn-corpus", i))
            for i in range(64)]
    latents = torch.stack([
        codec.encode(canvases_to_tensor(s.frames, dtype=torch.float32))
        for s in seqs])
    return latents, [s.caption for s in seqs]


@pytest.fixture(scope="session")
def trained_arn(micro_base, schedule, arn_corpus):
    """~1 minute of conditioning-network training on the frozen base."""
    latents, captions = arn_corpus
    arn = build_arn(micro_base, ARNConfig(), seed=3)
    result = train_arn(micro_base, arn, schedule, latents, captions,
                       ArnTrainConfig(steps=600, lr=1e-2, batch_size=4,
                                      seed=5))
    arn.eval()
    return arn, result
