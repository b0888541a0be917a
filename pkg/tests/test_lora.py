"""Adapter mechanics and the two-stage fine-tuning protocol.

Training oracles run against the shared pretrained base from conftest:
low-rank updates on attention projections have almost no leverage on a
random network (its attention maps are near-uniform, so the adapters can
only add near-constant fields), while on a warmed-up backbone they adapt
quickly. The overfit probes freeze (t, eps) per example so each adapter
stage is a regression the adapters can actually drive down; the adaptation
data (the last four corpus sequences) is held out from pretraining so the
adapters have something real to learn.
"""

import copy

import pytest
import torch
from conftest import SMALL
from torch import nn

from paintseq.lora import (
    LoraAdapter,
    LoraLinear,
    LoraTrainConfig,
    adapter_state_keys,
    effective_weight,
    eject,
    fold_adapters,
    frozen_state_hash,
    inject,
    load_adapters,
    make_adapter,
    mount_adapters,
    mounted_adapters,
    save_adapters,
    train_spatial_lora,
    train_temporal_lora,
)
from paintseq.model.config import ModelConfig
from paintseq.model.unet import SequenceUNet
from paintseq.text import tokenize_batch
from paintseq.util import state_dict_hash, torch_generator

# SMALL builds 7 attention triples (2 down levels x 1 res block, 1 mid,
# 2 up levels x 2 blocks), each holding 8 spatial and 4 temporal Linears.
N_SPATIAL = 56
N_TEMPORAL = 28


def fresh_model(seed=0):
    torch.manual_seed(seed)
    return SequenceUNet(SMALL)


def randomize(model, seed, std=0.1):
    gen = torch_generator(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
    return model


def forward_args(model, b=1, seed=0):
    gen = torch_generator(seed)
    cfg = model.config
    z = torch.randn(b, cfg.f, cfg.in_channels, cfg.resolution, cfg.resolution,
                    generator=gen)
    t = torch.randint(0, 1000, (b,), generator=gen)
    with torch.no_grad():
        emb = model.encode_text(
            tokenize_batch(["sksA painting process"] * b, cfg.max_tokens))
    return z, t, emb


def perturb_adapters(adapters, seed, std=0.05):
    """Push B off zero so adapters actually change the forward pass."""
    gen = torch_generator(seed)
    with torch.no_grad():
        for adapter in adapters.values():
            adapter.B.copy_(
                torch.randn(adapter.B.shape, generator=gen,
                            dtype=adapter.B.dtype) * std)


class TestAdapterBasics:
    def base(self):
        torch.manual_seed(3)
        return nn.Linear(10, 12)

    def test_make_adapter_shapes_and_init(self):
        adapter = make_adapter("lin", self.base(), rank=4, scale=1.0,
                               group="spatial", seed=0)
        adapter.validate()
        assert adapter.A.shape == (12, 4)
        assert adapter.B.shape == (10, 4)
        assert torch.all(adapter.B == 0)
        assert torch.any(adapter.A != 0)
        assert adapter.A.abs().mean() < 1.0  # random-small, not unit-scale

    def test_rank_bounds(self):
        with pytest.raises(ValueError, match="rank"):
            make_adapter("lin", self.base(), rank=0, scale=1.0,
                         group="spatial", seed=0)
        with pytest.raises(ValueError, match="rank"):
            make_adapter("lin", self.base(), rank=11, scale=1.0,
                         group="spatial", seed=0)

    def test_column_count_must_match_rank(self):
        bad = LoraAdapter(name="x", A=nn.Parameter(torch.zeros(12, 4)),
                          B=nn.Parameter(torch.zeros(10, 3)), r=4,
                          scale=1.0, group="spatial")
        with pytest.raises(ValueError, match="columns"):
            bad.validate()

    def test_unknown_group_rejected(self):
        bad = LoraAdapter(name="x", A=nn.Parameter(torch.zeros(12, 4)),
                          B=nn.Parameter(torch.zeros(10, 4)), r=4,
                          scale=1.0, group="conv")
        with pytest.raises(ValueError, match="group"):
            bad.validate()

    def test_effective_weight_zero_b_is_exact(self):
        base = self.base()
        adapter = make_adapter("lin", base, rank=4, scale=1.0,
                               group="spatial", seed=0)
        assert torch.equal(effective_weight(base.weight, adapter), base.weight)

    def test_effective_weight_full_rank_representability(self):
        # With r = m = n, A = delta and B = I, the update reproduces any
        # dense delta exactly.
        gen = torch_generator(5)
        W = torch.randn(6, 6, generator=gen)
        delta = torch.randn(6, 6, generator=gen)
        adapter = LoraAdapter(name="w", A=nn.Parameter(delta.clone()),
                              B=nn.Parameter(torch.eye(6)), r=6,
                              scale=1.0, group="spatial")
        assert torch.allclose(effective_weight(W, adapter), W + delta,
                              rtol=0, atol=0)

    def test_effective_weight_applies_scale(self):
        gen = torch_generator(6)
        W = torch.randn(5, 7, generator=gen)
        A = torch.randn(5, 2, generator=gen)
        B = torch.randn(7, 2, generator=gen)
        adapter = LoraAdapter(name="w", A=nn.Parameter(A), B=nn.Parameter(B),
                              r=2, scale=0.7, group="temporal")
        expected = W + 0.7 * (A @ B.T)
        assert torch.allclose(effective_weight(W, adapter), expected,
                              rtol=0, atol=0)

    def test_effective_weight_dim_mismatch(self):
        adapter = make_adapter("lin", self.base(), rank=4, scale=1.0,
                               group="spatial", seed=0)
        with pytest.raises(ValueError, match="conform"):
            effective_weight(torch.zeros(9, 10), adapter)
        with pytest.raises(ValueError, match="matrix"):
            effective_weight(torch.zeros(9), adapter)


class TestLoraLinear:
    def wrapped(self, seed=0):
        torch.manual_seed(7)
        base = nn.Linear(10, 12)
        adapter = make_adapter("lin", base, rank=4, scale=0.5,
                               group="spatial", seed=seed)
        return base, adapter, LoraLinear(base, adapter)

    def test_zero_init_neutrality_bitwise(self):
        base, _, wrapper = self.wrapped()
        x = torch.randn(20, 10, generator=torch_generator(1))
        assert torch.equal(wrapper(x), base(x))

    def test_forward_matches_formula(self):
        base, adapter, wrapper = self.wrapped()
        perturb_adapters({"lin": adapter}, seed=2)
        x = torch.randn(20, 10, generator=torch_generator(1))
        expected = base(x) + adapter.scale * (x @ adapter.B) @ adapter.A.T
        assert torch.allclose(wrapper(x), expected, rtol=0, atol=0)

    def test_merged_agrees_with_injected(self):
        base, adapter, wrapper = self.wrapped()
        perturb_adapters({"lin": adapter}, seed=2)
        merged = wrapper.merged()
        x = torch.randn(50, 10, generator=torch_generator(1))
        y_injected = wrapper(x)
        y_merged = merged(x)
        rel = (y_injected - y_merged).norm() / y_injected.norm()
        assert rel < 1e-5

    def test_wrap_freezes_base_and_restore_reenables(self):
        base, adapter, wrapper = self.wrapped()
        assert not base.weight.requires_grad
        assert not base.bias.requires_grad
        assert wrapper.lora_A.requires_grad and wrapper.lora_B.requires_grad
        restored = wrapper.restore()
        assert restored is base
        assert base.weight.requires_grad and base.bias.requires_grad

    def test_wrap_rejects_non_linear(self):
        adapter = make_adapter("lin", nn.Linear(10, 12), rank=4, scale=1.0,
                               group="spatial", seed=0)
        with pytest.raises(TypeError, match="Linear"):
            LoraLinear(nn.Conv2d(3, 3, 1), adapter)

    def test_wrap_rejects_mismatched_adapter(self):
        adapter = make_adapter("lin", nn.Linear(10, 12), rank=4, scale=1.0,
                               group="spatial", seed=0)
        with pytest.raises(ValueError, match="fit"):
            LoraLinear(nn.Linear(9, 12), adapter)


class TestInjectEject:
    def test_inject_targets_every_registry_projection(self):
        model = randomize(fresh_model(), seed=11)
        registry = model.attention_registry()
        assert sum(1 for g in registry.values() if g == "spatial") == N_SPATIAL
        assert sum(1 for g in registry.values() if g == "temporal") == N_TEMPORAL

        adapters = inject(model, "spatial", rank=4, scale=1.0, seed=0)
        assert len(adapters) == N_SPATIAL
        for name, adapter in adapters.items():
            assert adapter.group == "spatial"
            assert isinstance(model.get_submodule(name), LoraLinear)
        # temporal projections untouched
        for name, group in registry.items():
            if group == "temporal":
                assert isinstance(model.get_submodule(name), nn.Linear)

    def test_inject_keeps_forward_identical_bitwise(self):
        model = randomize(fresh_model(), seed=11)
        z, t, emb = forward_args(model)
        with torch.no_grad():
            before = model(z, t, emb)
        inject(model, "spatial", rank=4, scale=1.0, seed=0)
        inject(model, "temporal", rank=4, scale=1.0, seed=1)
        with torch.no_grad():
            after = model(z, t, emb)
        assert torch.equal(before, after)

    def test_double_injection_error(self):
        model = fresh_model()
        inject(model, "spatial", rank=4, scale=1.0, seed=0)
        with pytest.raises(RuntimeError, match="already has an adapter"):
            inject(model, "spatial", rank=4, scale=1.0, seed=1)

    def test_unknown_group_error(self):
        with pytest.raises(ValueError, match="group"):
            inject(fresh_model(), "conv", rank=4)

    def test_eject_restores_base_bitwise(self):
        model = randomize(fresh_model(), seed=11)
        h0 = state_dict_hash(model)
        original = model.get_submodule("mid_attn.spatial.to_q")
        z, t, emb = forward_args(model)
        with torch.no_grad():
            before = model(z, t, emb)

        spatial = inject(model, "spatial", rank=4, scale=1.0, seed=0)
        inject(model, "temporal", rank=4, scale=1.0, seed=1)
        perturb_adapters(spatial, seed=2)
        with torch.no_grad():
            perturbed = model(z, t, emb)
        assert not torch.allclose(perturbed, before)

        removed = eject(model)
        assert len(removed) == N_SPATIAL + N_TEMPORAL
        assert state_dict_hash(model) == h0
        assert model.get_submodule("mid_attn.spatial.to_q") is original
        assert original.weight.requires_grad
        with torch.no_grad():
            after = model(z, t, emb)
        assert torch.equal(after, before)

    def test_eject_single_group(self):
        model = fresh_model()
        inject(model, "spatial", rank=4, scale=1.0, seed=0)
        inject(model, "temporal", rank=4, scale=1.0, seed=1)
        removed = eject(model, "temporal")
        assert len(removed) == N_TEMPORAL
        left = mounted_adapters(model)
        assert len(left) == N_SPATIAL
        assert all(a.group == "spatial" for a in left.values())


class TestFoldAdapters:
    def test_folded_model_matches_injected_forward(self):
        model = randomize(fresh_model(), seed=13)
        adapters = inject(model, "spatial", rank=4, scale=1.0, seed=0)
        perturb_adapters(adapters, seed=3)
        z, t, emb = forward_args(model)
        with torch.no_grad():
            y_injected = model(z, t, emb)

        folded = fold_adapters(model)
        assert not mounted_adapters(folded)
        with torch.no_grad():
            y_folded = folded(z, t, emb)
        rel = (y_injected - y_folded).norm() / y_injected.norm()
        assert rel < 1e-5
        # the original keeps its wrappers
        assert len(mounted_adapters(model)) == N_SPATIAL


class TestAdapterIO:
    def test_save_load_round_trip(self, tmp_path):
        model = fresh_model()
        adapters = inject(model, "temporal", rank=3, scale=0.5, seed=4)
        perturb_adapters(adapters, seed=5)
        path = tmp_path / "adapters.pt"
        save_adapters(adapters, path)
        loaded = load_adapters(path)
        assert len(loaded) == N_TEMPORAL
        by_name = {a.name: a for a in loaded}
        for name, adapter in adapters.items():
            twin = by_name[name]
            assert twin.group == adapter.group
            assert twin.r == adapter.r == 3
            assert twin.scale == adapter.scale == 0.5
            assert torch.equal(twin.A, adapter.A)
            assert torch.equal(twin.B, adapter.B)

    def test_mount_on_matching_model(self, tmp_path):
        model = randomize(fresh_model(), seed=17)
        adapters = inject(model, "spatial", rank=4, scale=1.0, seed=4)
        perturb_adapters(adapters, seed=5)
        path = tmp_path / "adapters.pt"
        save_adapters(adapters, path)

        twin = randomize(fresh_model(), seed=17)
        mount_adapters(twin, load_adapters(path))
        z, t, emb = forward_args(model)
        with torch.no_grad():
            assert torch.equal(model(z, t, emb), twin(z, t, emb))

    def test_mount_missing_targets_lists_them(self, tmp_path):
        model = fresh_model()
        adapters = inject(model, "spatial", rank=4, scale=1.0, seed=4)
        path = tmp_path / "adapters.pt"
        save_adapters(adapters, path)

        shallow = SequenceUNet(ModelConfig(
            resolution=16, in_channels=3, base_channels=8, channel_mults=(1,),
            num_res_blocks=1, f=4, text_dim=16, heads=2, max_tokens=8))
        with pytest.raises(ValueError, match="missing") as err:
            mount_adapters(shallow, load_adapters(path))
        assert "down.1" in str(err.value)
        assert not mounted_adapters(shallow)

    def test_mount_refuses_double_targets(self, tmp_path):
        model = fresh_model()
        adapters = inject(model, "spatial", rank=4, scale=1.0, seed=4)
        path = tmp_path / "adapters.pt"
        save_adapters(adapters, path)
        with pytest.raises(RuntimeError, match="already has an adapter"):
            mount_adapters(model, load_adapters(path))


# --------------------------------------------------------------- training
#
# `schedule`, `micro_corpus` (16 sequences; 12 pretrain + 4 held out) and
# `micro_base` (800-step resampled-noise pretrain) come from conftest.


class TestTrainSpatial:
    def test_overfit_halves_loss_and_freezes_the_rest(self, micro_base,
                                                      micro_corpus, schedule):
        latents, captions = micro_corpus
        model = copy.deepcopy(micro_base)
        conv_before = model.conv_out.weight.clone()
        temporal_before = model.get_submodule(
            "mid_attn.temporal.to_v").weight.clone()

        cfg = LoraTrainConfig(steps=200, lr=1e-2, batch_size=4, rank=4,
                              seed=5, resample_noise=False)
        result = train_spatial_lora(model, schedule, latents[12:, -1],
                                    captions[12:], cfg)

        assert result.group == "spatial"
        assert len(result.adapters) == N_SPATIAL
        assert len(result.losses) == 200
        assert result.loss_end < 0.5 * result.loss_start
        # adapters moved while everything else stayed put
        assert any(torch.any(a.B != 0) for a in result.adapters.values())
        assert torch.equal(model.conv_out.weight, conv_before)
        assert torch.equal(
            model.get_submodule("mid_attn.temporal.to_v").weight,
            temporal_before)
        assert frozen_state_hash(
            model, adapter_state_keys(model, "spatial")) == result.frozen_hash
        manifest = result.to_manifest()
        assert manifest["optimizer"] == "adam"
        assert manifest["loss_end"] == result.loss_end

    def test_rerun_reproduces_loss_trace(self, micro_base, micro_corpus,
                                         schedule):
        latents, captions = micro_corpus
        cfg = LoraTrainConfig(steps=20, lr=1e-3, batch_size=4, rank=4, seed=8)
        traces = []
        for _ in range(2):
            model = copy.deepcopy(micro_base)
            result = train_spatial_lora(model, schedule, latents[12:, -1],
                                        captions[12:], cfg)
            traces.append(result.losses)
        assert traces[0] == traces[1]
        assert all(torch.isfinite(torch.tensor(traces[0])).tolist())

    def test_divergence_aborts(self, micro_base, micro_corpus, schedule):
        latents, captions = micro_corpus
        model = copy.deepcopy(micro_base)
        with torch.no_grad():
            model.conv_in.weight[0, 0, 0, 0] = float("nan")
        cfg = LoraTrainConfig(steps=5, lr=1e-3, batch_size=4, rank=4, seed=8)
        with pytest.raises(RuntimeError, match="diverged at step 0"):
            train_spatial_lora(model, schedule, latents[12:, -1],
                               captions[12:], cfg)

    def test_input_validation(self, micro_base, micro_corpus, schedule):
        latents, captions = micro_corpus
        model = copy.deepcopy(micro_base)
        cfg = LoraTrainConfig(steps=5)
        with pytest.raises(ValueError, match="single frames"):
            train_spatial_lora(model, schedule, latents[12:], captions[12:],
                               cfg)
        with pytest.raises(ValueError, match="captions"):
            train_spatial_lora(model, schedule, latents[12:, -1],
                               captions[12:14], cfg)
        with pytest.raises(ValueError, match="optimizer"):
            train_spatial_lora(model, schedule, latents[12:, -1],
                               captions[12:], LoraTrainConfig(optimizer="sgd"))


class TestTrainTemporal:
    def test_overfit_halves_loss_with_spatial_frozen(self, micro_base,
                                                     micro_corpus, schedule):
        latents, captions = micro_corpus
        model = copy.deepcopy(micro_base)
        h_base = state_dict_hash(model)
        spatial = inject(model, "spatial", rank=4, scale=1.0, seed=9)
        spatial_before = {n: (a.A.clone(), a.B.clone())
                          for n, a in spatial.items()}
        conv_before = model.conv_out.weight.clone()

        cfg = LoraTrainConfig(steps=150, lr=2e-2, batch_size=4, rank=8,
                              seed=6, resample_noise=False)
        result = train_temporal_lora(model, schedule, latents[12:],
                                     captions[12:], cfg)

        assert result.group == "temporal"
        assert len(result.adapters) == N_TEMPORAL
        assert result.loss_end < 0.5 * result.loss_start
        assert torch.equal(model.conv_out.weight, conv_before)
        for name, (A0, B0) in spatial_before.items():
            assert torch.equal(spatial[name].A, A0)
            assert torch.equal(spatial[name].B, B0)

        # ejecting everything restores the pretrained base bitwise
        eject(model)
        assert state_dict_hash(model) == h_base
        z, t, emb = forward_args(model)
        with torch.no_grad():
            assert torch.equal(model(z, t, emb), micro_base(z, t, emb))

    def test_requires_spatial_adapters_mounted(self, micro_base, micro_corpus,
                                               schedule):
        latents, captions = micro_corpus
        model = copy.deepcopy(micro_base)
        cfg = LoraTrainConfig(steps=5)
        with pytest.raises(RuntimeError, match="spatial adapters mounted"):
            train_temporal_lora(model, schedule, latents[12:],
                                captions[12:], cfg)

    def test_sequence_shape_validated(self, micro_base, micro_corpus,
                                      schedule):
        latents, captions = micro_corpus
        model = copy.deepcopy(micro_base)
        inject(model, "spatial", rank=4, scale=1.0, seed=9)
        with pytest.raises(ValueError, match=r"\(n, f, c, h, w\)"):
            train_temporal_lora(model, schedule, latents[12:, -1],
                                captions[12:], LoraTrainConfig(steps=5))
