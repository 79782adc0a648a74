"""Command-line entry point orchestrating the full pipeline:
phantom generation, registration, training, sweeps, synthesis, evaluation,
and the blinded reader study.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
failure.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from .errors import ConfigError, IoError, NumericalError

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

PHASE_FILES = {
    "non_contrast": "non_contrast.ctv",
    "nephrographic": "nephrographic.ctv",
    "urographic": "urographic.ctv",
}


def pipeline_command(fn):
    """Map module exceptions to the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (IoError, OSError) as exc:
            click.echo(f"i/o error: {exc}", err=True)
            sys.exit(EXIT_IO)
        except NumericalError as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(EXIT_NUMERICAL)

    return wrapper


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise IoError(str(exc))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}")
    if not isinstance(obj, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return obj


def resolve(config: dict, allowed: set[str], overrides: dict) -> dict:
    """Flags beat the config file, which beats defaults. Unknown config keys
    are rejected rather than ignored."""
    unknown = set(config) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(config)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


@click.group()
def main():
    """Nephrographic-phase CT synthesis pipeline."""


@main.command("phantom")
@click.option("--n", default=1, show_default=True, help="Number of phantoms.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON file of phantom config overrides.")
@pipeline_command
def cmd_phantom(n, seed, out_dir, config_path):
    """Generate synthetic three-phase phantoms with ground-truth labels."""
    import dataclasses

    from .phantom import (Lesion, PhantomConfig, generate_phantom,
                          make_manifests, randomized_config, save_truth)
    from .volume_io import write_manifests, write_volume

    allowed = {f.name for f in dataclasses.fields(PhantomConfig)}
    overrides = resolve(load_config_file(config_path), allowed, {})
    if "lesions" in overrides:
        overrides["lesions"] = tuple(
            Lesion(tuple(l["center_mm"]), l["radius_mm"], l["kind"], l["kidney"])
            for l in overrides["lesions"]
        )
    for key in ("dims", "spacing_mm", "body_axes_mm", "kidney_axes_mm",
                "collecting_axes_mm"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    out_dir = Path(out_dir)
    for i in range(n):
        cfg = randomized_config(seed + i, **overrides)
        volumes, truth = generate_phantom(cfg)
        case_dir = out_dir / cfg.patient_id
        case_dir.mkdir(parents=True, exist_ok=True)
        for phase, volume in volumes.items():
            write_volume(volume, case_dir / PHASE_FILES[phase.value])
        save_truth(truth, case_dir / "truth.json")
        write_manifests(make_manifests(cfg, truth), case_dir / "manifests.json")
        click.echo(f"{cfg.patient_id}: wrote 3 volumes + truth + manifests")


@main.command("register")
@click.option("--fixed", required=True, type=click.Path())
@click.option("--moving", required=True, type=click.Path())
@click.option("--out-dir", required=True, type=click.Path())
@pipeline_command
def cmd_register(fixed, moving, out_dir):
    """Register a moving phase onto the fixed frame and resample it."""
    from .registration import register_affine, resample
    from .volume_io import read_volume, write_volume

    fixed_volume = read_volume(fixed)
    moving_volume = read_volume(moving)
    result = register_affine(fixed_volume, moving_volume)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.transform.save(out_dir / "transform.json")
    registered = resample(moving_volume, result.transform, fixed_volume)
    write_volume(registered, out_dir / "registered.ctv")
    (out_dir / "registration.json").write_text(json.dumps({
        "similarity": result.similarity,
        "iterations_used": result.iterations_used,
    }, indent=2))
    click.echo(f"similarity {result.similarity:.4f} after {result.iterations_used} iterations")


def _load_triplets(data_dir: Path):
    from .phantom import kidney_z_range
    from .training import triplets_from_volumes
    from .volume_io import Phase, read_volume

    triplets = []
    cases = sorted(p for p in Path(data_dir).iterdir() if p.is_dir())
    if not cases:
        raise ConfigError(f"no phantom case directories under {data_dir}")
    for case in cases:
        volumes = {
            phase: read_volume(case / PHASE_FILES[phase.value]) for phase in Phase
        }
        truth_path = case / "truth.json"
        z_range = None
        if truth_path.exists():
            z_range = json.loads(truth_path.read_text()).get("kidney_z_range")
        triplets.extend(triplets_from_volumes(volumes, z_range))
    return triplets


TRAIN_KEYS = {"learning_rate", "epochs", "lambda_p", "lambda_r", "lambda_adv",
              "batch_size", "seed", "checkpoint_every"}
MODEL_KEYS = {"input_channels", "output_channels", "base_channels",
              "bottleneck_blocks", "transformer_dim", "attention_heads",
              "mlp_hidden_units", "token_grid", "image_size", "weight_tying"}


def _build_configs(config_path, lr, epochs, batch_size, seed):
    from .model import ResnctConfig
    from .training import TrainConfig

    file_cfg = load_config_file(config_path)
    model_cfg = ResnctConfig(**resolve(file_cfg.get("model", {}), MODEL_KEYS, {}))
    train_cfg = TrainConfig(**resolve(
        file_cfg.get("train", {}), TRAIN_KEYS,
        {"learning_rate": lr, "epochs": epochs, "batch_size": batch_size, "seed": seed},
    ))
    unknown = set(file_cfg) - {"model", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return model_cfg, train_cfg


@main.command("train")
@click.option("--data-dir", required=True, type=click.Path())
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--lr", type=float, default=None, help="Learning rate override.")
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--heldout-fraction", default=0.2, show_default=True)
@pipeline_command
def cmd_train(data_dir, out_dir, lr, epochs, batch_size, seed, config_path, heldout_fraction):
    """Train the generator/discriminator pair on phantom triplets."""
    from .model import build_discriminator, build_generator
    from .training import train
    from .volume_io import split_dataset

    model_cfg, train_cfg = _build_configs(config_path, lr, epochs, batch_size, seed)
    triplets = _load_triplets(Path(data_dir))
    train_set, heldout = split_dataset(triplets, 1.0 - heldout_fraction, train_cfg.seed)
    generator = build_generator(model_cfg, train_cfg.seed)
    discriminator = build_discriminator(model_cfg, train_cfg.seed + 1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = train(generator, discriminator, train_set, train_cfg,
                heldout=heldout or None, checkpoint_dir=out_dir)
    log.save(out_dir / "train_log.jsonl")
    last = log.epochs[-1]
    click.echo(f"trained {train_cfg.epochs} epochs; final pixel loss {last['pixel']:.4f}")


@main.command("sweep")
@click.option("--data-dir", required=True, type=click.Path())
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--lrs", default="2e-3,2e-4,2e-5", show_default=True)
@click.option("--epoch-grid", default="200,500,700", show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(), default=None)
@pipeline_command
def cmd_sweep(data_dir, out_dir, lrs, epoch_grid, seed, config_path):
    """Grid-search learning rate and epoch count on held-out phantoms."""
    from .training import sweep
    from .volume_io import split_dataset

    model_cfg, train_cfg = _build_configs(config_path, None, None, None, seed)
    triplets = _load_triplets(Path(data_dir))
    train_set, heldout = split_dataset(triplets, 0.8, train_cfg.seed)
    try:
        rates = tuple(float(v) for v in lrs.split(",") if v)
        counts = tuple(int(v) for v in epoch_grid.split(",") if v)
    except ValueError as exc:
        raise ConfigError(f"bad sweep grid: {exc}")
    rows = sweep(train_set, heldout, model_cfg, rates, counts, train_cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sweep.json").write_text(json.dumps(rows, indent=2))
    with open(out_dir / "sweep.csv", "w") as fp:
        fp.write("learning_rate,epochs,psnr_db,ssim,best\n")
        for row in rows:
            fp.write(f"{row['learning_rate']},{row['epochs']},"
                     f"{row['psnr_db']:.4f},{row['ssim']:.4f},{row['best']}\n")
    best = next(r for r in rows if r["best"])
    click.echo(f"best cell: lr {best['learning_rate']}, epochs {best['epochs']}, "
               f"psnr {best['psnr_db']:.2f} dB")


@main.command("synth")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--non-contrast", "nc_path", required=True, type=click.Path())
@click.option("--urographic", "ur_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@pipeline_command
def cmd_synth(checkpoint, nc_path, ur_path, out):
    """Synthesize the nephrographic phase from a trained checkpoint."""
    import torch

    from .model import load_generator
    from .volume_io import (CtVolume, Phase, WindowSpec, read_volume,
                            unit_to_hu, window_to_unit, write_volume)

    generator, _ = load_generator(checkpoint)
    generator.eval()
    nc = read_volume(nc_path)
    ur = read_volume(ur_path)
    if nc.shape != ur.shape:
        raise ConfigError(f"input volumes disagree in shape: {nc.shape} vs {ur.shape}")
    window = WindowSpec()
    slices = []
    with torch.no_grad():
        for z in range(nc.shape[0]):
            source = torch.from_numpy(np.stack([
                window_to_unit(nc.voxels[z], window),
                window_to_unit(ur.voxels[z], window),
            ])[None]).float()
            slices.append(unit_to_hu(generator(source)[0, 0].numpy(), window))
    volume = CtVolume(
        voxels=np.rint(np.stack(slices)).astype(np.int16),
        spacing_mm=nc.spacing_mm,
        origin_mm=nc.origin_mm,
        phase_label=Phase.NEPHROGRAPHIC,
        patient_id=nc.patient_id,
    )
    write_volume(volume, out)
    click.echo(f"synthesized {volume.shape[0]} slices -> {out}")


@main.command("eval")
@click.option("--pred", required=True, type=click.Path(), help="Synthesized CTV volume.")
@click.option("--target", required=True, type=click.Path(), help="Reference CTV volume.")
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--roi-truth", type=click.Path(), default=None,
              help="Phantom truth JSON for lesion ROI attenuation checks.")
@pipeline_command
def cmd_eval(pred, target, out_dir, roi_truth):
    """Per-slice similarity metrics, tables, CSVs, and figures."""
    from .metrics import MetricsReport, line_profile
    from .report import write_eval_report
    from .volume_io import WindowSpec, read_volume, window_to_unit

    pred_volume = read_volume(pred)
    target_volume = read_volume(target)
    if pred_volume.shape != target_volume.shape:
        raise ConfigError(
            f"volumes disagree in shape: {pred_volume.shape} vs {target_volume.shape}"
        )
    window = WindowSpec()
    report = MetricsReport()
    for z in range(pred_volume.shape[0]):
        report.add_pair(
            window_to_unit(pred_volume.voxels[z], window),
            window_to_unit(target_volume.voxels[z], window),
        )
    mid = pred_volume.shape[0] // 2
    _, rows, cols = pred_volume.shape
    p0, p1 = (rows / 2, 0), (rows / 2, cols - 1)
    profiles = {
        "synthesized": line_profile(pred_volume.voxels[mid].astype(float), p0, p1, cols),
        "reference": line_profile(target_volume.voxels[mid].astype(float), p0, p1, cols),
    }
    regions = {
        "synthesized": pred_volume.voxels.astype(float).ravel(),
        "reference": target_volume.voxels.astype(float).ravel(),
    }
    created = write_eval_report(report, out_dir, profiles, regions)
    if roi_truth is not None:
        created.append(_roi_report(pred_volume, roi_truth, Path(out_dir)))
    click.echo((Path(out_dir) / "metrics_table.txt").read_text())
    click.echo("wrote: " + ", ".join(str(p) for p in created))


def _roi_report(pred_volume, roi_truth, out_dir) -> Path:
    from .metrics import roi_mean_hu

    roi_truth = Path(roi_truth)
    truth = json.loads(roi_truth.read_text())
    labels = np.load(roi_truth.with_name(truth["labels_file"]))
    rows = []
    for entry in truth.get("lesion_mean_hu", []):
        mask = labels == entry["label"]
        rows.append({
            "kind": entry["kind"],
            "target_hu": entry["nephrographic"],
            "synthesized_hu": roi_mean_hu(pred_volume.voxels.astype(float), mask),
        })
    path = out_dir / "lesion_roi.json"
    path.write_text(json.dumps(rows, indent=2))
    return path


@main.group("study")
def cmd_study():
    """Blinded reader-study service and reporting."""


@cmd_study.command("serve")
@click.option("--pool-dir", required=True, type=click.Path(),
              help="Directory with real/ and synthesized/ subdirectories of .npy HU slices.")
@click.option("--log", "log_path", required=True, type=click.Path())
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8765, show_default=True)
@pipeline_command
def cmd_study_serve(pool_dir, log_path, host, port):
    """Run the reader-study HTTP service."""
    import uvicorn

    from .service import create_app

    app = create_app(load_pool(pool_dir), log_path)
    uvicorn.run(app, host=host, port=port)


def load_pool(pool_dir):
    from .service import ImagePool
    from .stats import TruthLabel

    pool_dir = Path(pool_dir)
    pool = ImagePool()
    counts = {}
    for label, sub in ((TruthLabel.REAL, "real"), (TruthLabel.SYNTHESIZED, "synthesized")):
        directory = pool_dir / sub
        if not directory.is_dir():
            raise ConfigError(f"missing pool directory {directory}")
        files = sorted(directory.glob("*.npy"))
        for path in files:
            pool.add(label, np.load(path))
        counts[sub] = len(files)
    if not counts.get("real") or not counts.get("synthesized"):
        raise ConfigError(f"pool under {pool_dir} is empty")
    click.echo(f"pool: {counts['real']} real, {counts['synthesized']} synthesized")
    return pool


@cmd_study.command("report")
@click.option("--log", "log_path", required=True, type=click.Path())
@click.option("--out", type=click.Path(), default=None, help="Write JSON report here.")
@pipeline_command
def cmd_study_report(log_path, out):
    """Aggregate a score log into the full study report."""
    from .service import StudyService
    from .stats import format_study_report, study_report

    if not Path(log_path).exists():
        raise IoError(f"no score log at {log_path}")
    service = StudyService.__new__(StudyService)
    service.log_path = Path(log_path)
    service._records = []
    service._replay_log()
    report = study_report(service._records)
    if out is not None:
        Path(out).write_text(json.dumps(report, indent=2, default=str))
    click.echo(format_study_report(report))


if __name__ == "__main__":
    main()
