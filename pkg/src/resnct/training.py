"""Adversarial training loop: least-squares GAN objective plus L1 pixel and
gradient-consistency terms, Adam with a constant-then-linear-decay schedule."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, NumericalError, ShapeError
from .model import (
    Discriminator,
    Generator,
    ResnctConfig,
    build_discriminator,
    build_generator,
    load_checkpoint,
    save_checkpoint,
)

SWEEP_LEARNING_RATES = (2e-3, 2e-4, 2e-5)
SWEEP_EPOCHS = (200, 500, 700)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    epochs: int = 700
    lambda_p: float = 100.0      # L1 pixel term
    lambda_r: float = 100.0      # gradient-consistency term
    lambda_adv: float = 100.0    # least-squares adversarial term
    batch_size: int = 4
    seed: int = 0
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if min(self.lambda_p, self.lambda_r, self.lambda_adv) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class PhaseTriplet:
    """Registered, windowed, slice-aligned training unit. Arrays are 2D
    unit-interval slices."""
    non_contrast: np.ndarray
    nephrographic: np.ndarray
    urographic: np.ndarray

    def __post_init__(self):
        shapes = {a.shape for a in (self.non_contrast, self.nephrographic, self.urographic)}
        if len(shapes) != 1:
            raise ShapeError(f"phase slices disagree in shape: {shapes}")


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        for key, value in record.items():
            if isinstance(value, float) and not math.isfinite(value):
                raise NumericalError(f"non-finite log value for {key}")
        self.epochs.append(record)

    def save(self, path) -> None:
        with open(path, "w") as fp:
            for record in self.epochs:
                fp.write(json.dumps(record) + "\n")


def _spatial_gradients(img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return img[..., 1:, :] - img[..., :-1, :], img[..., :, 1:] - img[..., :, :-1]


def generator_loss(synth: torch.Tensor, target: torch.Tensor,
                   disc_scores_on_synth: torch.Tensor,
                   cfg: TrainConfig) -> tuple[torch.Tensor, dict]:
    """L_G = lambda_adv*mean((D(synth)-1)^2) + lambda_p*L1(synth, target)
    + lambda_r*L1 on forward-difference spatial gradients."""
    if synth.shape != target.shape:
        raise ShapeError(f"shape mismatch: {tuple(synth.shape)} vs {tuple(target.shape)}")
    adv = torch.mean((disc_scores_on_synth - 1.0) ** 2)
    pixel = torch.mean(torch.abs(synth - target))
    gy_s, gx_s = _spatial_gradients(synth)
    gy_t, gx_t = _spatial_gradients(target)
    consistency = (torch.mean(torch.abs(gy_s - gy_t)) + torch.mean(torch.abs(gx_s - gx_t))) / 2.0
    total = cfg.lambda_adv * adv + cfg.lambda_p * pixel + cfg.lambda_r * consistency
    components = {
        "adv": float(adv.detach()),
        "pixel": float(pixel.detach()),
        "consistency": float(consistency.detach()),
    }
    return total, components


def discriminator_loss(scores_real: torch.Tensor,
                       scores_synth: torch.Tensor) -> torch.Tensor:
    if scores_real.shape != scores_synth.shape:
        raise ShapeError(
            f"shape mismatch: {tuple(scores_real.shape)} vs {tuple(scores_synth.shape)}"
        )
    return 0.5 * torch.mean((scores_real - 1.0) ** 2) + 0.5 * torch.mean(scores_synth**2)


def _optimizer_tensors(opt: torch.optim.Adam, prefix: str) -> dict:
    out = {}
    for i, p in enumerate(opt.param_groups[0]["params"]):
        state = opt.state.get(p)
        if not state:
            continue
        step = state["step"]
        out[f"{prefix}.{i}.step"] = (
            step.detach().clone() if torch.is_tensor(step) else torch.tensor(float(step))
        )
        out[f"{prefix}.{i}.exp_avg"] = state["exp_avg"]
        out[f"{prefix}.{i}.exp_avg_sq"] = state["exp_avg_sq"]
    return out


def _restore_optimizer(opt: torch.optim.Adam, tensors: dict, prefix: str) -> None:
    for i, p in enumerate(opt.param_groups[0]["params"]):
        key = f"{prefix}.{i}.step"
        if key not in tensors:
            continue
        opt.state[p] = {
            "step": tensors[key].clone(),
            "exp_avg": tensors[f"{prefix}.{i}.exp_avg"].clone(),
            "exp_avg_sq": tensors[f"{prefix}.{i}.exp_avg_sq"].clone(),
        }


def _lr_factor(epoch: int, total_epochs: int) -> float:
    """Constant for the first half, then linear decay to 0 at the end."""
    half = total_epochs / 2.0
    if epoch < half:
        return 1.0
    return max(0.0, (total_epochs - epoch) / (total_epochs - half))


def _batches(triplets: list[PhaseTriplet], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(triplets))
    for start in range(0, len(order), batch_size):
        chunk = [triplets[i] for i in order[start:start + batch_size]]
        source = torch.from_numpy(
            np.stack([np.stack([t.non_contrast, t.urographic]) for t in chunk])
        ).float()
        target = torch.from_numpy(
            np.stack([t.nephrographic[None] for t in chunk])
        ).float()
        yield source, target


def evaluate(generator: Generator, triplets: list[PhaseTriplet]) -> dict:
    """Held-out PSNR/SSIM means over a triplet set."""
    from .metrics import psnr, ssim

    generator.eval()
    psnrs, ssims = [], []
    with torch.no_grad():
        for t in triplets:
            source = torch.from_numpy(
                np.stack([t.non_contrast, t.urographic])[None]
            ).float()
            synth = generator(source)[0, 0].numpy()
            psnrs.append(psnr(synth, t.nephrographic))
            ssims.append(ssim(synth, t.nephrographic))
    generator.train()
    finite = [p for p in psnrs if math.isfinite(p)]
    return {
        "psnr_db": float(np.mean(finite)) if finite else math.inf,
        "ssim": float(np.mean(ssims)),
    }


def train(
    generator: Generator,
    discriminator: Discriminator,
    triplets: list[PhaseTriplet],
    cfg: TrainConfig,
    heldout: list[PhaseTriplet] | None = None,
    checkpoint_dir=None,
    start_epoch: int = 0,
    log: TrainLog | None = None,
    optimizer_state: dict | None = None,
) -> TrainLog:
    """Alternating discriminator/generator updates, one of each per batch.
    Deterministic for a fixed seed: the data order for epoch e is drawn from
    a generator seeded with (seed, e), so resuming at any epoch boundary
    reproduces the uninterrupted run."""
    if not triplets:
        raise ConfigError("empty training set")
    log = log or TrainLog()
    model_cfg = generator.cfg
    opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.learning_rate, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=cfg.learning_rate, betas=(0.5, 0.999))
    if optimizer_state:
        _restore_optimizer(opt_g, optimizer_state, "g")
        _restore_optimizer(opt_d, optimizer_state, "d")
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    def emit(epoch):
        if checkpoint_dir is None:
            return
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(checkpoint_dir / f"generator-{epoch:05d}.rnck",
                        generator, model_cfg, epoch=epoch, seed=cfg.seed)
        save_checkpoint(checkpoint_dir / f"discriminator-{epoch:05d}.rnck",
                        discriminator, model_cfg, epoch=epoch, seed=cfg.seed)
        save_checkpoint(
            checkpoint_dir / f"optimizer-{epoch:05d}.rnck",
            {**_optimizer_tensors(opt_g, "g"), **_optimizer_tensors(opt_d, "d")},
            model_cfg, epoch=epoch, seed=cfg.seed,
        )

    for epoch in range(start_epoch, cfg.epochs):
        factor = _lr_factor(epoch, cfg.epochs)
        for group in opt_g.param_groups:
            group["lr"] = cfg.learning_rate * factor
        for group in opt_d.param_groups:
            group["lr"] = cfg.learning_rate * factor

        rng = np.random.default_rng([cfg.seed, epoch])
        sums = {"adv": 0.0, "pixel": 0.0, "consistency": 0.0, "disc": 0.0}
        batches = 0
        for source, target in _batches(triplets, cfg.batch_size, rng):
            synth = generator(source)

            opt_d.zero_grad()
            scores_real = discriminator(torch.cat([source, target], dim=1))
            scores_synth = discriminator(torch.cat([source, synth.detach()], dim=1))
            loss_d = discriminator_loss(scores_real, scores_synth)
            loss_d.backward()
            opt_d.step()

            opt_g.zero_grad()
            scores = discriminator(torch.cat([source, synth], dim=1))
            loss_g, components = generator_loss(synth, target, scores, cfg)
            loss_g.backward()
            opt_g.step()

            if not (math.isfinite(float(loss_g.detach())) and math.isfinite(float(loss_d.detach()))):
                emit(epoch)
                raise NumericalError(f"non-finite loss at epoch {epoch}")
            for key, value in components.items():
                sums[key] += value
            sums["disc"] += float(loss_d.detach())
            batches += 1

        record = {"epoch": epoch, "batches": batches,
                  **{k: v / batches for k, v in sums.items()},
                  "lr": cfg.learning_rate * factor}
        if heldout:
            record.update(evaluate(generator, heldout))
        log.append(record)
        if (epoch + 1) % cfg.checkpoint_every == 0:
            emit(epoch + 1)
    emit(cfg.epochs)
    return log


def resume(checkpoint_dir, epoch: int) -> tuple[Generator, Discriminator, dict, int]:
    """Rebuild both models and the Adam moments from a checkpoint set saved
    at an epoch boundary. Continuing with train(..., start_epoch=epoch,
    optimizer_state=state) reproduces the uninterrupted run exactly: the data
    order is reseeded per epoch and the optimizer moments are restored
    bit-exactly."""
    checkpoint_dir = Path(checkpoint_dir)
    meta_g, tensors_g = load_checkpoint(checkpoint_dir / f"generator-{epoch:05d}.rnck")
    _, tensors_d = load_checkpoint(checkpoint_dir / f"discriminator-{epoch:05d}.rnck")
    _, optimizer_state = load_checkpoint(checkpoint_dir / f"optimizer-{epoch:05d}.rnck")
    model_cfg = ResnctConfig(**meta_g["config"])
    generator = Generator(model_cfg)
    generator.load_state_dict(tensors_g)
    discriminator = Discriminator(model_cfg)
    discriminator.load_state_dict(tensors_d)
    return generator, discriminator, optimizer_state, meta_g["epoch"]


def sweep(
    triplets: list[PhaseTriplet],
    heldout: list[PhaseTriplet],
    model_cfg: ResnctConfig,
    learning_rates=SWEEP_LEARNING_RATES,
    epoch_counts=SWEEP_EPOCHS,
    base_cfg: TrainConfig | None = None,
) -> list[dict]:
    """Grid search over (learning rate, epochs); one row per cell with
    held-out metrics, best row first marked by \"best\": true."""
    learning_rates = tuple(learning_rates)
    epoch_counts = tuple(epoch_counts)
    if not learning_rates or not epoch_counts:
        raise ConfigError("empty sweep grid")
    base = base_cfg or TrainConfig()
    rows = []
    for lr in learning_rates:
        for epochs in epoch_counts:
            cfg = TrainConfig(
                learning_rate=lr, epochs=epochs, lambda_p=base.lambda_p,
                lambda_r=base.lambda_r, lambda_adv=base.lambda_adv,
                batch_size=base.batch_size, seed=base.seed,
                checkpoint_every=max(epochs, 1),
            )
            generator = build_generator(model_cfg, cfg.seed)
            discriminator = build_discriminator(model_cfg, cfg.seed + 1)
            train(generator, discriminator, triplets, cfg)
            metrics = evaluate(generator, heldout)
            rows.append({"learning_rate": lr, "epochs": epochs, **metrics})
    best = max(range(len(rows)), key=lambda i: rows[i]["psnr_db"])
    for i, row in enumerate(rows):
        row["best"] = i == best
    return rows


def triplets_from_volumes(
    volumes: dict, z_range=None, window=None, crop=None
) -> list[PhaseTriplet]:
    """Slice a registered three-phase volume dict into windowed triplets.

    `crop`, if given, is a `(y0, x0, size)` in-plane window applied to every
    slice, for training on region-of-interest patches of high-resolution
    volumes instead of whole slices."""
    from .volume_io import Phase, WindowSpec, window_to_unit

    window = window or WindowSpec()
    nc = volumes[Phase.NON_CONTRAST]
    ng = volumes[Phase.NEPHROGRAPHIC]
    ur = volumes[Phase.UROGRAPHIC]
    z_lo, z_hi = z_range if z_range is not None else (0, nc.shape[0])
    if crop is not None:
        y0, x0, size = crop
        if (y0 < 0 or x0 < 0 or y0 + size > nc.shape[1]
                or x0 + size > nc.shape[2]):
            raise ShapeError(f"crop {crop} exceeds slice shape {nc.shape[1:]}")
        sel = (slice(y0, y0 + size), slice(x0, x0 + size))
    else:
        sel = (slice(None), slice(None))
    out = []
    for z in range(z_lo, z_hi):
        out.append(
            PhaseTriplet(
                non_contrast=window_to_unit(nc.voxels[z][sel], window),
                nephrographic=window_to_unit(ng.voxels[z][sel], window),
                urographic=window_to_unit(ur.voxels[z][sel], window),
            )
        )
    return out
