"""Command-line interface and config-document tests.

A module-scoped workspace runs the staged pipeline once (synth -> pretrain
-> conditioning network) at micro scale; individual tests then drive the
generation, evaluation, and export commands against those artifacts and
check the documented exit codes for every failure class.
"""

import json
import time
from pathlib import Path
from types import SimpleNamespace

import pytest
import torch
from click.testing import CliRunner

from paintseq.cli import main
from paintseq.config import ConfigError, ConfigFile, default_sections
from paintseq.pipeline import RunManifest, SampleConfig

# ---------------------------------------------------------------------------
# config document


class TestConfigFile:
    def test_defaults_cover_all_sections(self):
        cfg = ConfigFile.defaults()
        assert sorted(cfg.sections) == sorted(
            ["data", "codec", "model", "arn", "lora", "train", "infer",
             "eval"])

    def test_defaults_are_copies(self):
        a = ConfigFile.defaults()
        a["model"]["f"] = 99
        assert ConfigFile.defaults()["model"]["f"] != 99
        assert default_sections()["model"]["f"] != 99

    def test_unknown_keys_listed(self):
        with pytest.raises(ConfigError, match=r"model\.bogus.*nope"):
            ConfigFile.from_dict({"model": {"bogus": 1}, "nope": {}})

    def test_section_must_be_object(self):
        with pytest.raises(ConfigError, match="must be an object"):
            ConfigFile.from_dict({"model": 3})

    def test_document_must_be_object(self):
        with pytest.raises(ConfigError, match="JSON object"):
            ConfigFile.from_dict([1, 2])

    def test_overlay_merges_with_defaults(self):
        cfg = ConfigFile.from_dict({"train": {"steps": 5}})
        assert cfg["train"]["steps"] == 5
        assert cfg["train"]["lr"] == ConfigFile.defaults()["train"]["lr"]

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ConfigFile.load(tmp_path / "nope.json")

    def test_load_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError, match="not valid JSON"):
            ConfigFile.load(p)

    def test_save_load_round_trip(self, tmp_path):
        cfg = ConfigFile.from_dict({"model": {"f": 4, "resolution": 16}})
        path = cfg.save(tmp_path / "c.json")
        assert ConfigFile.load(path).sections == cfg.sections

    def test_model_config_accessor(self):
        cfg = ConfigFile.from_dict(
            {"model": {"resolution": 16, "base_channels": 8,
                       "channel_mults": [1, 2], "num_res_blocks": 1,
                       "f": 4, "text_dim": 16, "heads": 2, "max_tokens": 8}})
        mc = cfg.model_config()
        assert mc.resolution == 16
        assert mc.channel_mults == (1, 2)
        assert mc.f == 4

    def test_model_config_validates(self):
        cfg = ConfigFile.from_dict({"model": {"resolution": 15}})
        with pytest.raises(ValueError):
            cfg.model_config()

    def test_schedule_accessor(self):
        cfg = ConfigFile.from_dict({"train": {"schedule_timesteps": 100}})
        assert cfg.schedule().T == 100

    def test_sample_config_accessor_and_overrides(self):
        cfg = ConfigFile.from_dict({"infer": {"steps": 12, "eta": 0.3}})
        sc = cfg.sample_config()
        assert sc == SampleConfig(steps=12, eta=0.3)
        # explicit overrides win; None means "not given"
        assert cfg.sample_config(steps=7).steps == 7
        assert cfg.sample_config(steps=None).steps == 12

    def test_stage_config_accessors(self):
        cfg = ConfigFile.from_dict({
            "arn": {"steps": 9, "k_max": 1, "fusion_lambda": 0.5},
            "lora": {"rank": 2, "steps": 11},
            "train": {"steps": 3, "ckpt_every": 1},
        })
        assert cfg.arn_train_config().steps == 9
        assert cfg.arn_train_config().k_max == 1
        assert cfg.arn_config().fusion_lambda == 0.5
        assert cfg.lora_train_config().rank == 2
        assert cfg.pretrain_config().steps == 3
        assert cfg.codec_config().mode == "identity"


# ---------------------------------------------------------------------------
# CLI workspace


def _invoke(args, **kwargs):
    runner = CliRunner()
    return runner.invoke(main, args, catch_exceptions=False, **kwargs)


def _workspace_config(root: Path) -> dict:
    return {
        "data": {"n": 8, "resolution": 16, "frames": 4, "seed": 3,
                 "out_dir": str(root / "data")},
        "model": {"resolution": 16, "base_channels": 8,
                  "channel_mults": [1, 2], "num_res_blocks": 1, "f": 4,
                  "text_dim": 16, "heads": 2, "max_tokens": 8},
        "train": {"steps": 40, "lr": 5e-3, "batch_size": 3,
                  "ckpt_every": 20, "run_root": str(root / "runs")},
        "arn": {"steps": 20, "lr": 5e-3, "k_max": 2},
        "lora": {"steps": 8, "lr": 1e-2},
        "infer": {"steps": 4, "n_samples": 1,
                  "out_dir": str(root / "gen")},
    }


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Workspace with a dataset, a pretrained model, and a trained
    conditioning network, produced entirely through the CLI."""
    root = tmp_path_factory.mktemp("cliws")
    doc = _workspace_config(root)
    config_path = root / "config.json"
    config_path.write_text(json.dumps(doc))

    t0 = time.monotonic()
    r = _invoke(["synth-data", "--config", str(config_path)])
    assert r.exit_code == 0, r.output

    r = _invoke(["train", "--stage", "pretrain", "--config",
                 str(config_path), "--json"])
    assert r.exit_code == 0, r.output
    pretrain = json.loads(r.output)

    doc["arn"]["base_ckpt"] = pretrain["ckpt"]
    doc["lora"] = dict(doc["lora"], base_ckpt=pretrain["ckpt"])
    doc["infer"]["ckpt"] = pretrain["ckpt"]
    config_path.write_text(json.dumps(doc))

    r = _invoke(["train", "--stage", "arn", "--config", str(config_path),
                 "--json"])
    assert r.exit_code == 0, r.output
    arn = json.loads(r.output)

    doc["infer"]["arn_ckpt"] = arn["ckpt"]
    config_path.write_text(json.dumps(doc))
    elapsed = time.monotonic() - t0

    return SimpleNamespace(root=root, doc=doc, config=config_path,
                           pretrain=pretrain, arn=arn, elapsed=elapsed)


def _rewrite(ws, tmp_path, **section_updates) -> Path:
    doc = json.loads(Path(ws.config).read_text())
    for section, updates in section_updates.items():
        doc[section] = dict(doc.get(section, {}), **updates)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


# ---------------------------------------------------------------------------
# synth-data


class TestSynthData:
    def test_same_seed_identical_manifests(self, ws, tmp_path):
        args = ["synth-data", "--n", "4", "--res", "16", "--frames", "3",
                "--seed", "7"]
        a = _invoke(args + ["--out", str(tmp_path / "a")])
        b = _invoke(args + ["--out", str(tmp_path / "b")])
        assert a.exit_code == 0 and b.exit_code == 0
        bytes_a = (tmp_path / "a" / "manifest.json").read_bytes()
        bytes_b = (tmp_path / "b" / "manifest.json").read_bytes()
        assert bytes_a == bytes_b

    def test_json_result_and_run_record(self, ws, tmp_path):
        out = tmp_path / "d"
        r = _invoke(["synth-data", "--n", "2", "--res", "16", "--frames",
                     "3", "--seed", "1", "--out", str(out), "--json"])
        assert r.exit_code == 0
        result = json.loads(r.output)
        assert result["ok"] is True and result["sequences"] == 2
        record = json.loads((out / "run.json").read_text())
        assert record["command"] == "synth-data"
        assert record["config"]["data"]["n"] == 2
        assert record["config"]["data"]["seed"] == 1
        assert record["run_id"].startswith("synth-data-")

    def test_strategy_mix_flag(self, ws, tmp_path):
        out = tmp_path / "mix"
        r = _invoke(["synth-data", "--n", "6", "--res", "16", "--frames",
                     "3", "--seed", "0", "--out", str(out),
                     "--strategy-mix", "raster_order=1,depth_order=1"])
        assert r.exit_code == 0
        records = json.loads((out / "manifest.json").read_text())
        assert {rec["strategy"] for rec in records} <= {"raster_order",
                                                        "depth_order"}

    def test_unknown_strategy_exits_2(self, tmp_path):
        r = _invoke(["synth-data", "--n", "2", "--out", str(tmp_path / "x"),
                     "--strategy-mix", "mystery_style"])
        assert r.exit_code == 2
        assert "mystery_style" in r.output

    def test_bad_mix_weight_exits_2(self, tmp_path):
        r = _invoke(["synth-data", "--out", str(tmp_path / "x"),
                     "--strategy-mix", "raster_order=lots"])
        assert r.exit_code == 2
        assert "weight must be a number" in r.output


# ---------------------------------------------------------------------------
# train


class TestTrain:
    def test_pretrain_learns_and_persists(self, ws):
        info = ws.pretrain
        assert info["probe_loss_end"] < info["probe_loss_start"]
        run_dir = Path(info["run_dir"])
        manifest = RunManifest.load(run_dir / "manifest.json")
        assert manifest.stage == "pretrain"
        assert Path(info["ckpt"]).is_file()

    def test_arn_stage_persists_manifest(self, ws):
        run_dir = Path(ws.arn["run_dir"])
        manifest = RunManifest.load(run_dir / "manifest.json")
        assert manifest.stage == "arn"
        assert Path(ws.arn["ckpt"]).is_file()

    def test_smoke_pipeline_budget(self, ws):
        # synth -> pretrain -> conditioning network, all through the CLI
        assert ws.elapsed < 900.0

    def test_unknown_config_keys_exit_2(self, ws, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"train": {"step": 5}}))
        r = _invoke(["train", "--stage", "pretrain", "--config", str(path)])
        assert r.exit_code == 2
        assert "train.step" in r.output

    def test_missing_config_file_exits_2(self, tmp_path):
        r = _invoke(["train", "--stage", "pretrain", "--config",
                     str(tmp_path / "none.json")])
        assert r.exit_code == 2

    def test_missing_dataset_exits_3(self, ws, tmp_path):
        path = _rewrite(ws, tmp_path, data={"out_dir": str(tmp_path / "no")})
        r = _invoke(["train", "--stage", "pretrain", "--config", str(path)])
        assert r.exit_code == 3

    def test_resume_only_for_pretrain(self, ws, tmp_path):
        r = _invoke(["train", "--stage", "arn", "--config", str(ws.config),
                     "--resume", str(tmp_path / "x.ckpt")])
        assert r.exit_code == 2
        assert "pretrain" in r.output

    def test_codec_stage_identity_mode_exits_2(self, ws):
        r = _invoke(["train", "--stage", "codec", "--config",
                     str(ws.config)])
        assert r.exit_code == 2
        assert "nothing to train" in r.output

    def test_codec_stage_learned(self, ws, tmp_path):
        path = _rewrite(ws, tmp_path, codec={
            "mode": "learned", "downsample_factor": 4,
            "latent_channels": 4, "width": 8, "epochs": 2,
            "batch_size": 8})
        r = _invoke(["train", "--stage", "codec", "--config", str(path),
                     "--json"])
        assert r.exit_code == 0, r.output
        result = json.loads(r.output)
        assert Path(result["ckpt"]).is_file()
        manifest = RunManifest.load(Path(result["run_dir"]) /
                                    "manifest.json")
        assert manifest.stage == "codec"
        assert manifest.hyperparameters["epochs"] == 2

    def test_arn_without_base_ckpt_exits_2(self, ws, tmp_path):
        path = _rewrite(ws, tmp_path, arn={"base_ckpt": None})
        r = _invoke(["train", "--stage", "arn", "--config", str(path)])
        assert r.exit_code == 2
        assert "arn.base_ckpt" in r.output

    def test_arn_with_missing_base_ckpt_exits_3(self, ws, tmp_path):
        path = _rewrite(ws, tmp_path,
                        arn={"base_ckpt": str(tmp_path / "gone.ckpt")})
        r = _invoke(["train", "--stage", "arn", "--config", str(path)])
        assert r.exit_code == 3

    def test_lora_stages_chain(self, ws, tmp_path):
        r = _invoke(["train", "--stage", "lora-spatial", "--config",
                     str(ws.config), "--json"])
        assert r.exit_code == 0, r.output
        spatial = json.loads(r.output)
        assert Path(spatial["ckpt"]).is_file()

        path = _rewrite(ws, tmp_path,
                        lora={"spatial_ckpt": spatial["ckpt"]})
        r = _invoke(["train", "--stage", "lora-temporal", "--config",
                     str(path), "--json"])
        assert r.exit_code == 0, r.output
        temporal = json.loads(r.output)
        manifest = RunManifest.load(Path(temporal["run_dir"]) /
                                    "manifest.json")
        assert manifest.stage == "lora-temporal"

    def test_lora_temporal_requires_spatial_ckpt(self, ws):
        r = _invoke(["train", "--stage", "lora-temporal", "--config",
                     str(ws.config)])
        assert r.exit_code == 2
        assert "lora.spatial_ckpt" in r.output


# ---------------------------------------------------------------------------
# generate


class TestGenerate:
    def test_tau_rejected_for_image_task(self, ws):
        r = _invoke(["generate", "--task", "image", "--tau", "3",
                     "--ref", "x.png", "--config", str(ws.config)])
        assert r.exit_code == 2
        assert "only valid for --task semi" in r.output

    def test_tau_rejected_for_text_task(self, ws):
        r = _invoke(["generate", "--task", "text", "--tau", "1",
                     "--config", str(ws.config)])
        assert r.exit_code == 2

    def test_image_requires_ref(self, ws):
        r = _invoke(["generate", "--task", "image", "--config",
                     str(ws.config)])
        assert r.exit_code == 2
        assert "--ref" in r.output

    def test_text_rejects_ref(self, ws):
        r = _invoke(["generate", "--task", "text", "--ref", "x.png",
                     "--config", str(ws.config)])
        assert r.exit_code == 2

    def test_semi_requires_tau(self, ws):
        r = _invoke(["generate", "--task", "semi", "--ref", "x.png",
                     "--config", str(ws.config)])
        assert r.exit_code == 2
        assert "--tau" in r.output

    def test_missing_ref_file_exits_3(self, ws, tmp_path):
        r = _invoke(["generate", "--task", "image", "--ref",
                     str(tmp_path / "none.png"), "--config",
                     str(ws.config)])
        assert r.exit_code == 3

    def test_missing_model_ckpt_config_exits_2(self, ws, tmp_path):
        path = _rewrite(ws, tmp_path, infer={"ckpt": None})
        r = _invoke(["generate", "--task", "text", "--config", str(path)])
        assert r.exit_code == 2
        assert "infer.ckpt" in r.output

    def test_stale_model_ckpt_path_exits_3(self, ws, tmp_path):
        path = _rewrite(ws, tmp_path,
                        infer={"ckpt": str(tmp_path / "gone.ckpt")})
        r = _invoke(["generate", "--task", "text", "--config", str(path)])
        assert r.exit_code == 3

    def test_text_task_writes_samples_and_record(self, ws, tmp_path):
        out = tmp_path / "text"
        r = _invoke(["generate", "--task", "text", "--prompt",
                     "sksB painting", "--seed", "5", "--out", str(out),
                     "--config", str(ws.config), "--json"])
        assert r.exit_code == 0, r.output
        result = json.loads(r.output)
        assert result["task"] == "text"
        assert len(result["samples"]) == 1
        sample = Path(result["samples"][0])
        assert sorted(p.name for p in sample.glob("frame_*.png")) == [
            "frame_00.png", "frame_01.png", "frame_02.png", "frame_03.png"]
        record = json.loads((out / "run.json").read_text())
        assert record["arguments"]["task"] == "text"
        assert record["seeds"]["sample"] == 5

    def test_image_task_deterministic_in_seed(self, ws, tmp_path):
        ref = Path(ws.doc["data"]["out_dir"]) / "seq_000000" / "frame_3.png"
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            r = _invoke(["generate", "--task", "image", "--ref", str(ref),
                         "--seed", "6", "--out", str(out), "--config",
                         str(ws.config)])
            assert r.exit_code == 0, r.output
            outs.append((out / "frame_03.png").read_bytes())
        assert outs[0] == outs[1]

        out = tmp_path / "c"
        r = _invoke(["generate", "--task", "image", "--ref", str(ref),
                     "--seed", "7", "--out", str(out), "--config",
                     str(ws.config)])
        assert r.exit_code == 0
        assert (out / "frame_03.png").read_bytes() != outs[0]

    def test_semi_task_runs(self, ws, tmp_path):
        ref = Path(ws.doc["data"]["out_dir"]) / "seq_000001" / "frame_1.png"
        out = tmp_path / "semi"
        r = _invoke(["generate", "--task", "semi", "--ref", str(ref),
                     "--tau", "1", "--out", str(out), "--config",
                     str(ws.config), "--json"])
        assert r.exit_code == 0, r.output
        result = json.loads(r.output)
        assert (out / "process.gif").is_file()
        assert result["task"] == "semi"

    def test_semi_tau_out_of_range_exits_2(self, ws, tmp_path):
        ref = Path(ws.doc["data"]["out_dir"]) / "seq_000001" / "frame_1.png"
        r = _invoke(["generate", "--task", "semi", "--ref", str(ref),
                     "--tau", "3", "--out", str(tmp_path / "x"),
                     "--config", str(ws.config)])
        assert r.exit_code == 2
        assert "final frame" in r.output

    def test_lambda_flag_accepted(self, ws, tmp_path):
        ref = Path(ws.doc["data"]["out_dir"]) / "seq_000000" / "frame_3.png"
        out = tmp_path / "lam"
        r = _invoke(["generate", "--task", "image", "--ref", str(ref),
                     "--lambda", "0.5", "--out", str(out), "--config",
                     str(ws.config)])
        assert r.exit_code == 0, r.output
        record = json.loads((out / "run.json").read_text())
        assert record["arguments"]["fusion_lambda"] == 0.5

    def test_conditioning_net_disabled_needs_no_arn_ckpt(self, ws, tmp_path):
        path = _rewrite(ws, tmp_path,
                        infer={"arn_ckpt": None,
                               "use_conditioning_net": False})
        ref = Path(ws.doc["data"]["out_dir"]) / "seq_000000" / "frame_3.png"
        r = _invoke(["generate", "--task", "image", "--ref", str(ref),
                     "--out", str(tmp_path / "noarn"), "--config",
                     str(path)])
        assert r.exit_code == 0, r.output


# ---------------------------------------------------------------------------
# evaluate and export-gif


class TestEvaluate:
    def test_self_comparison_is_zero(self, ws, tmp_path):
        seq_dir = Path(ws.doc["data"]["out_dir"]) / "seq_000000"
        report_path = tmp_path / "rep.json"
        r = _invoke(["evaluate", "--pred-dir", str(seq_dir), "--ref-dir",
                     str(seq_dir), "--report", str(report_path)])
        assert r.exit_code == 0, r.output
        assert "mean" in r.output
        report = json.loads(report_path.read_text())
        assert report["mean"]["mse"] == 0.0
        assert report["mean"]["l1"] == 0.0
        assert report["samples"] == 4

    def test_json_output(self, ws):
        seq_dir = Path(ws.doc["data"]["out_dir"]) / "seq_000001"
        r = _invoke(["evaluate", "--pred-dir", str(seq_dir), "--ref-dir",
                     str(seq_dir), "--json"])
        assert r.exit_code == 0
        report = json.loads(r.output)
        assert report["mean"]["proxy"] == 0.0

    def test_count_mismatch_exits_2(self, ws, tmp_path):
        src = Path(ws.doc["data"]["out_dir"]) / "seq_000000"
        short = tmp_path / "short"
        short.mkdir()
        for name in ("frame_0.png", "frame_1.png"):
            (short / name).write_bytes((src / name).read_bytes())
        r = _invoke(["evaluate", "--pred-dir", str(short), "--ref-dir",
                     str(src)])
        assert r.exit_code == 2
        assert "mismatch" in r.output

    def test_missing_dir_exits_3(self, ws, tmp_path):
        seq_dir = Path(ws.doc["data"]["out_dir"]) / "seq_000000"
        r = _invoke(["evaluate", "--pred-dir", str(tmp_path / "none"),
                     "--ref-dir", str(seq_dir)])
        assert r.exit_code == 3


class TestExportGif:
    def test_exports_gif_and_sheet(self, ws, tmp_path):
        seq_dir = Path(ws.doc["data"]["out_dir"]) / "seq_000002"
        out = tmp_path / "proc.gif"
        r = _invoke(["export-gif", "--seq-dir", str(seq_dir), "--out",
                     str(out), "--json"])
        assert r.exit_code == 0, r.output
        result = json.loads(r.output)
        assert Path(result["gif"]).is_file()
        assert Path(result["sheet"]).is_file()
        assert result["frames"] == 4

    def test_empty_dir_exits_3(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        r = _invoke(["export-gif", "--seq-dir", str(empty), "--out",
                     str(tmp_path / "x.gif")])
        assert r.exit_code == 3


# ---------------------------------------------------------------------------
# deterministic mode


class TestDeterministicMode:
    def test_env_var_pins_threads(self, ws, tmp_path, monkeypatch):
        monkeypatch.setenv("PAINTSEQ_DETERMINISTIC", "1")
        out = tmp_path / "det"
        r = _invoke(["generate", "--task", "text", "--seed", "9", "--out",
                     str(out), "--config", str(ws.config)])
        assert r.exit_code == 0, r.output
        assert torch.get_num_threads() == 1

    def test_seed_determines_output_bytes(self, ws, tmp_path, monkeypatch):
        monkeypatch.setenv("PAINTSEQ_DETERMINISTIC", "1")
        payloads = []
        for name in ("p", "q"):
            out = tmp_path / name
            r = _invoke(["generate", "--task", "text", "--seed", "11",
                         "--out", str(out), "--config", str(ws.config)])
            assert r.exit_code == 0
            payloads.append(
                (out / "sample_00" / "frame_03.png").read_bytes())
        assert payloads[0] == payloads[1]
