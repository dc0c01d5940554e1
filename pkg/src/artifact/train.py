"""Training loop: optimizers, one iteration, metrics log and checkpoints."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import ImageDataset, batches
from .model import Model3D
from .objectives import NoiseSource
from .optim import Adam, DualOptimizer
from .persistence import save_checkpoint

METRIC_COLUMNS = ("step", "recon", "reg", "total", "theta_mu", "theta_sigma", "disc_acc", "z_mean_norm")
CHECKPOINT_NAME = "checkpoint.v3da"
METRICS_NAME = "metrics.tsv"


def make_optimizers(model: Model3D) -> dict:
    """Main, azimuth and discriminator Adam instances; absent groups map to None."""
    cfg = model.config
    kw = dict(beta1=cfg.beta1, beta2=cfg.beta2, clip=cfg.clip)
    main = Adam(model.main_parameters(), lr=cfg.lr, name="main", **kw)
    azim = model.azimuth_parameters()
    disc = model.disc_parameters()
    return {
        "main": main,
        "azimuth": Adam(azim, lr=cfg.lr_azimuth, name="azimuth", **kw) if azim else None,
        "disc": Adam(disc, lr=cfg.lr, name="disc", **kw) if disc else None,
    }


def train_step(model: Model3D, opts: dict, images: np.ndarray, noise: NoiseSource) -> dict:
    """One iteration: every registered parameter is updated exactly once.

    All backward passes finish before any optimizer step, so the discriminator
    update cannot leak into the generator gradient of the same iteration.
    """
    model.train()
    model.zero_grad()
    res = model.forward(images, noise)
    if "disc" in res.losses:
        res.losses["disc"].backward()
    res.losses["total"].backward()
    if opts["disc"] is not None:
        opts["disc"].step()
    DualOptimizer(opts["main"], opts["azimuth"]).step("both")

    # optional extra azimuth-only updates with the autoencoder frozen
    for _ in range(model.config.azimuth_steps - 1):
        if opts["azimuth"] is None:
            break
        model.zero_grad()
        model.forward(images, noise).losses["total"].backward()
        opts["azimuth"].step()
    return res.diagnostics


def format_metrics(step: int, diag: dict) -> str:
    vals = [f"{diag[c]:.9g}" for c in METRIC_COLUMNS[1:]]
    return "\t".join([str(step)] + vals)


@dataclass
class TrainResult:
    model: Model3D
    optimizers: dict
    history: list = field(default_factory=list)  # per-step diagnostics, with "step" and "epoch"
    checkpoint: Path | None = None
    seconds: float = 0.0


def train(model: Model3D, dataset: ImageDataset, steps: int, batch_size: int = 32,
          out_dir=None, seed: int | None = None, checkpoint_every: int = 0,
          callback: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Run ``steps`` iterations.

    With ``out_dir`` set, writes ``metrics.tsv`` (one line per step), a final
    ``checkpoint.v3da`` and, if ``checkpoint_every`` > 0, numbered snapshots.
    ``steps=0`` only writes the initial checkpoint.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    seed = model.config.seed if seed is None else seed
    root = NoiseSource(seed)
    data_noise, model_noise = root.child(0), root.child(1)
    opts = make_optimizers(model)
    out = Path(out_dir) if out_dir is not None else None
    log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log = open(out / METRICS_NAME, "w")
        log.write("\t".join(METRIC_COLUMNS) + "\n")

    result = TrainResult(model, opts)
    t0 = time.perf_counter()
    try:
        stream = batches(dataset, batch_size, data_noise) if steps else iter(())
        for step, (epoch, _, images) in zip(range(1, steps + 1), stream):
            diag = train_step(model, opts, images, model_noise)
            if not math.isfinite(diag["total"]):
                raise FloatingPointError(f"non-finite loss at step {step}: {diag}")
            result.history.append(dict(diag, step=step, epoch=epoch))
            if log is not None:
                log.write(format_metrics(step, diag) + "\n")
                if checkpoint_every and step % checkpoint_every == 0:
                    save_checkpoint(out / f"checkpoint-{step:06d}.v3da", model, opts, step)
            if callback is not None:
                callback(step, diag)
    finally:
        if log is not None:
            log.close()
    if out is not None:
        result.checkpoint = out / CHECKPOINT_NAME
        save_checkpoint(result.checkpoint, model, opts, len(result.history))
    result.seconds = time.perf_counter() - t0
    return result


def epoch_means(history: list, key: str = "recon") -> list[float]:
    """Average of ``key`` over each epoch recorded in ``history``."""
    epochs = sorted({h["epoch"] for h in history})
    return [float(np.mean([h[key] for h in history if h["epoch"] == e])) for e in epochs]
