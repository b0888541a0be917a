"""Command-line entry point.

One command suite wires the whole toolkit: dataset synthesis, the five
training stages, the three generation tasks, evaluation, and GIF export.
All knobs live in a single JSON config document (see `config.py`);
command-line flags override the corresponding config values. Every command
that produces artifacts writes a run record before the first artifact, so a
directory can always be traced back to the exact configuration and seeds
that produced it.

Exit codes: 0 success, 2 configuration error, 3 missing artifact,
4 runtime failure. Set PAINTSEQ_DETERMINISTIC=1 to pin thread counts and
kernels so a fixed --seed reproduces outputs bitwise.
"""

import functools
import hashlib
import json
import re
import sys
from datetime import datetime, timezone
from pathlib import Path

import click
import torch

from .arn import build_arn, load_arn
from .codec import (
    IdentityCodec,
    build_codec,
    canvases_to_tensor,
    load_codec,
    save_codec,
    train_codec,
)
from .config import ConfigError, ConfigFile
from .evalkit import FeatureProbe, consistency_report, export_gif
from .lora import load_adapters, mount_adapters
from .model import SequenceUNet, load_model_checkpoint
from .pipeline import (
    RunManifest,
    dataset_fingerprint,
    image2painting,
    make_run_dir,
    pretrain_painting_model,
    run_arn_stage,
    run_lora_stage,
    save_sequence_outputs,
    semi2complete,
    text2painting,
)
from .strokes.dataset import (
    generate_dataset,
    load_manifest,
    load_sequence,
    read_frame_png,
)
from .util import apply_deterministic_mode

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_RUNTIME = 4


# ---------------------------------------------------------------------------
# error handling and output helpers


def _fail(code: int, message: str, as_json: bool) -> None:
    if as_json:
        click.echo(json.dumps(
            {"ok": False, "error": message, "exit_code": code},
            sort_keys=True))
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    """Map exception classes onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        as_json = bool(kwargs.get("as_json", False))
        try:
            return fn(*args, **kwargs)
        except SystemExit:
            raise
        except click.ClickException:
            raise
        except FileNotFoundError as exc:
            _fail(EXIT_MISSING, str(exc), as_json)
        except (ConfigError, ValueError) as exc:
            _fail(EXIT_CONFIG, str(exc), as_json)
        except Exception as exc:  # noqa: BLE001 - boundary of the process
            _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}", as_json)

    return wrapper


def _emit(result: dict, as_json: bool, human: str) -> None:
    if as_json:
        click.echo(json.dumps(result, indent=2, sort_keys=True, default=str))
    else:
        click.echo(human)


# ---------------------------------------------------------------------------
# config plumbing


def _load_config(path) -> ConfigFile:
    if path is None:
        return ConfigFile.defaults()
    try:
        return ConfigFile.load(path)
    except FileNotFoundError as exc:
        # a config file the user named is configuration, not a run artifact
        raise ConfigError(str(exc))


def _require_path(value, key: str) -> Path:
    """Resolve a config/flag path that must point at an existing artifact."""
    if value in (None, ""):
        raise ConfigError(f"{key} is required for this command")
    path = Path(value)
    if not path.exists():
        raise FileNotFoundError(f"missing artifact: {key} = {path}")
    return path


def _parse_mix(text: str) -> dict:
    """'a=2,b=1' or bare 'a' -> strategy weight mapping."""
    mix = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" in part:
            name, _, weight = part.partition("=")
            try:
                mix[name.strip()] = float(weight)
            except ValueError:
                raise ConfigError(
                    f"bad --strategy-mix entry {part!r}: weight must be a number")
        else:
            mix[part] = 1.0
    if not mix:
        raise ConfigError("--strategy-mix is empty")
    return mix


def _write_run_record(out_dir: Path, command: str, cfg: ConfigFile,
                      seeds: dict, arguments: dict = None) -> dict:
    """Persist the full effective configuration before any artifact."""
    payload = {
        "command": command,
        "seeds": seeds,
        "arguments": arguments or {},
        "config": cfg.to_dict(),
    }
    digest = hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()
    record = dict(payload)
    record["run_id"] = f"{command}-{digest[:10]}"
    record["config_hash"] = digest
    record["created"] = datetime.now(timezone.utc).isoformat()
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return record


# ---------------------------------------------------------------------------
# shared loading steps


def _inference_codec(cfg: ConfigFile):
    ccfg = cfg.codec_config()
    if ccfg.mode == "identity":
        return IdentityCodec()
    path = _require_path(cfg["codec"]["ckpt"], "codec.ckpt")
    return load_codec(path, expected_config=ccfg)


def _load_base_model(cfg: ConfigFile, section: str, key: str) -> SequenceUNet:
    path = _require_path(cfg[section][key], f"{section}.{key}")
    model, _ = load_model_checkpoint(path, expected_config=cfg.model_config())
    return model


def _load_training_data(cfg: ConfigFile, codec):
    """Dataset directory -> ((n, f, c, h, w) latents, captions)."""
    data_dir = Path(cfg["data"]["out_dir"])
    manifest = load_manifest(data_dir)
    mc = cfg.model_config()
    latents, captions = [], []
    for rec in manifest.records:
        if rec["f"] != mc.f:
            raise ConfigError(
                f"dataset sequences have f={rec['f']} but model.f={mc.f}")
        seq = load_sequence(data_dir, rec)
        frames = canvases_to_tensor(seq.frames, dtype=torch.float32)
        latents.append(codec.encode(frames))
        captions.append(seq.caption)
    stacked = torch.stack(latents)
    if (stacked.shape[2] != mc.in_channels
            or stacked.shape[-1] != mc.resolution):
        raise ConfigError(
            f"encoded dataset latents are {tuple(stacked.shape[2:])} but the "
            f"model expects ({mc.in_channels}, {mc.resolution}, "
            f"{mc.resolution}); check codec and model sections")
    return stacked, captions


def _frame_key(path: Path) -> int:
    digits = re.sub(r"\D", "", path.stem)
    return int(digits) if digits else 0


def _read_frame_dir(directory: Path, flag: str) -> list:
    if not directory.is_dir():
        raise FileNotFoundError(f"missing artifact: {flag} = {directory}")
    paths = sorted(directory.glob("frame_*.png"), key=_frame_key)
    if not paths:
        raise FileNotFoundError(
            f"missing artifact: no frame_*.png files in {directory}")
    return [read_frame_png(p) for p in paths]


# ---------------------------------------------------------------------------
# command group


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def main():
    """Painting-process model toolkit: synthesize stroke-level painting
    datasets, train the frame-sequence diffusion model and its adapters,
    and generate, evaluate, or export painting processes."""
    apply_deterministic_mode()


_CONFIG_OPT = click.option(
    "--config", "config_path", type=click.Path(), default=None,
    help="JSON config document; omitted keys use their defaults.")
_JSON_OPT = click.option(
    "--json", "as_json", is_flag=True, default=False,
    help="Print a machine-readable JSON result on stdout.")


# ---------------------------------------------------------------------------
# synth-data


@main.command("synth-data")
@click.option("--n", type=int, default=None, help="Number of sequences.")
@click.option("--strategy-mix", "strategy_mix", type=str, default=None,
              help="Strategy weights, e.g. 'raster_order=1,depth_order=2' "
                   "or a single strategy name.")
@click.option("--res", type=int, default=None, help="Canvas resolution.")
@click.option("--frames", type=int, default=None, help="Frames per sequence.")
@click.option("--seed", type=int, default=None, help="Dataset seed.")
@click.option("--out", type=click.Path(), default=None,
              help="Output directory.")
@_CONFIG_OPT
@_JSON_OPT
@_guarded
def synth_data(n, strategy_mix, res, frames, seed, out, config_path, as_json):
    """Synthesize a painting-process dataset (frames + manifest.json)."""
    cfg = _load_config(config_path)
    data = cfg["data"]
    if n is not None:
        data["n"] = n
    if strategy_mix is not None:
        data["strategy_mix"] = _parse_mix(strategy_mix)
    if res is not None:
        data["resolution"] = res
    if frames is not None:
        data["frames"] = frames
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["out_dir"] = str(out)

    out_dir = Path(data["out_dir"])
    record = _write_run_record(out_dir, "synth-data", cfg,
                               seeds={"data": data["seed"]})
    manifest = generate_dataset(
        data["n"], data["strategy_mix"], data["resolution"], data["frames"],
        data["seed"], out_dir, gamma=data["gamma"])
    result = {
        "ok": True,
        "run_id": record["run_id"],
        "out_dir": str(out_dir),
        "sequences": len(manifest),
        "manifest": str(out_dir / "manifest.json"),
    }
    _emit(result, as_json,
          f"wrote {len(manifest)} sequences to {out_dir}")


# ---------------------------------------------------------------------------
# train


def _train_codec_stage(cfg: ConfigFile, run_root: Path) -> dict:
    ccfg = cfg.codec_config()
    if ccfg.mode != "learned":
        raise ConfigError(
            "codec.mode is 'identity'; there is nothing to train")
    c = cfg["codec"]
    codec = build_codec(ccfg, width=c["width"])
    data_dir = Path(cfg["data"]["out_dir"])
    manifest = load_manifest(data_dir)
    frames, captions = [], []
    for rec in manifest.records:
        seq = load_sequence(data_dir, rec)
        frames.append(canvases_to_tensor(seq.frames, dtype=torch.float32))
        captions.append(seq.caption)
    flat = torch.cat(frames)

    run_manifest = RunManifest(
        run_id="",
        stage="codec",
        seeds={"train": c["seed"]},
        hyperparameters={k: c[k] for k in
                         ("epochs", "lr", "lr_min", "batch_size", "width",
                          "downsample_factor", "latent_channels")},
        dataset_fingerprint=dataset_fingerprint(flat, captions),
    )
    run_manifest.run_id = f"codec-{run_manifest.config_hash[:10]}"
    run_dir = make_run_dir(run_root, "codec", run_manifest.config_hash,
                           run_id=run_manifest.run_id)
    run_manifest.save(run_dir)
    losses = train_codec(codec, flat, epochs=c["epochs"], lr=c["lr"],
                         lr_min=c["lr_min"], batch_size=c["batch_size"],
                         seed=c["seed"])
    ckpt = run_dir / "codec.ckpt"
    save_codec(codec, ckpt)
    return {
        "ok": True, "stage": "codec", "run_id": run_manifest.run_id,
        "run_dir": str(run_dir), "ckpt": str(ckpt),
        "loss_first": losses[0], "loss_last": losses[-1],
    }


def _train_pretrain_stage(cfg: ConfigFile, schedule, run_root: Path,
                          resume) -> dict:
    codec = _inference_codec(cfg)
    latents, captions = _load_training_data(cfg, codec)
    torch.manual_seed(cfg["model"]["init_seed"])
    model = SequenceUNet(cfg.model_config())
    resume_path = None
    if resume is not None:
        resume_path = _require_path(resume, "--resume checkpoint")
    res = pretrain_painting_model(latents, captions, model, schedule,
                                  cfg.pretrain_config(), run_root=run_root,
                                  resume_from=resume_path)
    return {
        "ok": True, "stage": "pretrain", "run_id": res.manifest.run_id,
        "run_dir": str(Path(res.ckpt_path).parent),
        "ckpt": str(res.ckpt_path),
        "probe_loss_start": res.probe_loss_start,
        "probe_loss_end": res.probe_loss_end,
    }


def _train_arn_stage(cfg: ConfigFile, schedule, run_root: Path) -> dict:
    codec = _inference_codec(cfg)
    latents, captions = _load_training_data(cfg, codec)
    model = _load_base_model(cfg, "arn", "base_ckpt")
    arn = build_arn(model, cfg.arn_config(), seed=cfg["arn"]["seed"])
    result, manifest, run_dir = run_arn_stage(
        model, arn, schedule, latents, captions, cfg.arn_train_config(),
        run_root)
    return {
        "ok": True, "stage": "arn", "run_id": manifest.run_id,
        "run_dir": str(run_dir), "ckpt": str(run_dir / "arn.ckpt"),
        "loss_start": result.loss_start, "loss_end": result.loss_end,
    }


def _train_lora_stage(cfg: ConfigFile, schedule, run_root: Path,
                      group: str) -> dict:
    codec = _inference_codec(cfg)
    latents, captions = _load_training_data(cfg, codec)
    model = _load_base_model(cfg, "lora", "base_ckpt")
    if group == "temporal":
        spatial_path = _require_path(cfg["lora"]["spatial_ckpt"],
                                     "lora.spatial_ckpt")
        mount_adapters(model, load_adapters(spatial_path))
    data = latents[:, -1] if group == "spatial" else latents
    result, manifest, run_dir = run_lora_stage(
        group, model, schedule, data, captions, cfg.lora_train_config(),
        run_root)
    return {
        "ok": True, "stage": f"lora-{group}", "run_id": manifest.run_id,
        "run_dir": str(run_dir),
        "ckpt": str(run_dir / f"lora_{group}.ckpt"),
        "loss_start": result.loss_start, "loss_end": result.loss_end,
    }


@main.command()
@click.option("--stage", required=True,
              type=click.Choice(["codec", "pretrain", "arn", "lora-spatial",
                                 "lora-temporal"]),
              help="Which training stage to run.")
@click.option("--resume", type=click.Path(), default=None,
              help="Checkpoint to resume from (pretrain only).")
@_CONFIG_OPT
@_JSON_OPT
@_guarded
def train(stage, resume, config_path, as_json):
    """Run one training stage against the configured dataset."""
    cfg = _load_config(config_path)
    if resume is not None and stage != "pretrain":
        raise ConfigError("--resume is only supported for --stage pretrain")
    schedule = cfg.schedule()
    run_root = Path(cfg["train"]["run_root"])

    if stage == "codec":
        result = _train_codec_stage(cfg, run_root)
    elif stage == "pretrain":
        result = _train_pretrain_stage(cfg, schedule, run_root, resume)
    elif stage == "arn":
        result = _train_arn_stage(cfg, schedule, run_root)
    else:
        result = _train_lora_stage(cfg, schedule, run_root,
                                   stage.removeprefix("lora-"))
    _emit(result, as_json,
          f"{result['stage']} finished: run_dir={result['run_dir']}")


# ---------------------------------------------------------------------------
# generate


@main.command()
@click.option("--task", required=True,
              type=click.Choice(["text", "image", "semi"]),
              help="Generation task.")
@click.option("--prompt", type=str, default="", help="Text prompt.")
@click.option("--ref", type=click.Path(), default=None,
              help="Reference image (PNG) for the image and semi tasks.")
@click.option("--tau", type=int, default=None,
              help="Frame index the reference occupies (semi task only; "
                   "the image task always pins the final frame).")
@click.option("--seed", type=int, default=None, help="Sampling seed.")
@click.option("--lambda", "lam", type=float, default=None,
              help="Feature-fusion weight; default 1.0, the conditioning "
                   "network's training value.")
@click.option("--steps", type=int, default=None, help="Sampling steps.")
@click.option("--out", type=click.Path(), default=None,
              help="Output directory.")
@_CONFIG_OPT
@_JSON_OPT
@_guarded
def generate(task, prompt, ref, tau, seed, lam, steps, out, config_path,
             as_json):
    """Generate a painting process from text, an image, or a partial work."""
    cfg = _load_config(config_path)
    infer = cfg["infer"]

    if tau is not None and task != "semi":
        raise ConfigError(
            "--tau is only valid for --task semi; the image task pins the "
            "reference to the final frame")
    if task in ("image", "semi") and ref is None:
        raise ConfigError(f"--task {task} requires --ref")
    if task == "text" and ref is not None:
        raise ConfigError("--ref is only valid for --task image or semi")
    if task == "semi" and tau is None:
        raise ConfigError("--task semi requires --tau")

    ref_image = None
    if ref is not None:
        ref_image = read_frame_png(_require_path(ref, "--ref"))

    seed = infer["seed"] if seed is None else seed
    out_dir = Path(out if out is not None else infer["out_dir"])
    sample_cfg = cfg.sample_config(steps=steps, fusion_lambda=lam)
    schedule = cfg.schedule()

    model = _load_base_model(cfg, "infer", "ckpt")
    codec = _inference_codec(cfg)
    if infer["lora_spatial_ckpt"]:
        mount_adapters(model, load_adapters(_require_path(
            infer["lora_spatial_ckpt"], "infer.lora_spatial_ckpt")))
    if infer["lora_temporal_ckpt"]:
        mount_adapters(model, load_adapters(_require_path(
            infer["lora_temporal_ckpt"], "infer.lora_temporal_ckpt")))
    arn = None
    if task in ("image", "semi") and sample_cfg.use_conditioning_net:
        arn = load_arn(_require_path(infer["arn_ckpt"], "infer.arn_ckpt"),
                       model)

    record = _write_run_record(
        out_dir, "generate", cfg, seeds={"sample": seed},
        arguments={"task": task, "prompt": prompt, "tau": tau,
                   "steps": sample_cfg.steps,
                   "fusion_lambda": sample_cfg.fusion_lambda})

    if task == "text":
        seqs = text2painting(model, schedule, codec, prompt,
                             infer["n_samples"], seed, sample_cfg)
        sample_dirs = []
        for j, seq in enumerate(seqs):
            sub = out_dir / f"sample_{j:02d}"
            save_sequence_outputs(seq, sub)
            sample_dirs.append(str(sub))
        result = {"ok": True, "task": task, "run_id": record["run_id"],
                  "out_dir": str(out_dir), "seed": seed,
                  "samples": sample_dirs}
        _emit(result, as_json,
              f"wrote {len(sample_dirs)} samples to {out_dir}")
        return

    if task == "image":
        seq = image2painting(model, arn, schedule, codec, ref_image,
                             prompt=prompt, seed=seed, cfg=sample_cfg)
    else:
        seq = semi2complete(model, arn, schedule, codec, ref_image, tau,
                            prompt=prompt, seed=seed, cfg=sample_cfg)
    outputs = save_sequence_outputs(seq, out_dir)
    result = {"ok": True, "task": task, "run_id": record["run_id"],
              "out_dir": str(out_dir), "seed": seed,
              "outputs": {k: str(v) for k, v in outputs.items()}}
    _emit(result, as_json, f"wrote painting process to {out_dir}")


# ---------------------------------------------------------------------------
# evaluate


@main.command()
@click.option("--pred-dir", required=True, type=click.Path(),
              help="Directory of generated frame_*.png files.")
@click.option("--ref-dir", required=True, type=click.Path(),
              help="Directory of reference frame_*.png files.")
@click.option("--report", "report_path", type=click.Path(), default=None,
              help="Write the full JSON report to this path.")
@_CONFIG_OPT
@_JSON_OPT
@_guarded
def evaluate(pred_dir, ref_dir, report_path, config_path, as_json):
    """Frame-by-frame consistency metrics between two sequence directories."""
    cfg = _load_config(config_path)
    preds = _read_frame_dir(Path(pred_dir), "--pred-dir")
    refs = _read_frame_dir(Path(ref_dir), "--ref-dir")
    probe = FeatureProbe(seed=cfg["eval"]["probe_seed"])
    report = consistency_report(preds, refs, extractor=probe)
    if report_path is not None:
        p = Path(report_path)
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
            fh.write("\n")
    if as_json:
        click.echo(report.to_json())
    else:
        click.echo(report.to_table())


# ---------------------------------------------------------------------------
# export-gif


@main.command("export-gif")
@click.option("--seq-dir", required=True, type=click.Path(),
              help="Directory of frame_*.png files.")
@click.option("--out", required=True, type=click.Path(),
              help="Output GIF path.")
@_CONFIG_OPT
@_JSON_OPT
@_guarded
def export_gif_cmd(seq_dir, out, config_path, as_json):
    """Bundle a frame directory into an animated GIF plus contact sheet."""
    cfg = _load_config(config_path)
    frames = _read_frame_dir(Path(seq_dir), "--seq-dir")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    info = export_gif(frames, out, total_duration=cfg["eval"]["gif_seconds"])
    result = {"ok": True, "gif": info.gif_path, "sheet": info.sheet_path,
              "frames": len(frames), "per_frame_ms": info.per_frame_ms}
    _emit(result, as_json, f"wrote {info.gif_path} ({len(frames)} frames)")


if __name__ == "__main__":
    main()
