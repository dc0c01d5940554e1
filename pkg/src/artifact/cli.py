"""Command line: train, reconstruct, sample, sweep, export-voxels, gradcheck, report.

Every command prints tab-separated ``key value`` lines between ``begin``/``end``
markers and writes its images and files under ``--out-dir``.
"""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import gradcheck, persistence
from .autodiff import Tensor
from .azimuth import parse_mode
from .data import batches_per_epoch, load_idx, load_named
from .model import ConfigError, Model3D, ModelConfig
from .objectives import NoiseSource
from .render import MODES, render
from .train import METRICS_NAME, epoch_means, train

SWEEP_STEPS = 64
ELEVATIONS = (0.0, 30.0, 90.0)

# flag name -> ModelConfig field
MODEL_FLAGS = {
    "objective": "objective", "azimuth": "azimuth", "texturizer": "texturizer", "sampling": "sampling",
    "dz": "dz", "beta": "beta", "lambda_reg": "lambda_reg", "lr": "lr", "lr_azimuth": "lr_azimuth",
    "beta1": "beta1", "beta2": "beta2", "azimuth_steps": "azimuth_steps", "width": "width",
}


class CliError(Exception):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("model")
    g.add_argument("--objective", choices=["vae", "beta-vae", "mu-vae", "aae"])
    g.add_argument("--azimuth", choices=["fixed", "uniform", "latent", "encoder-uniform"])
    g.add_argument("--texturizer", action="store_true", default=None)
    g.add_argument("--sampling", choices=list(MODES))
    g.add_argument("--dz", type=int)
    g.add_argument("--beta", type=float, help="beta-VAE weight (default 30)")
    g.add_argument("--lambda-reg", type=float)
    g.add_argument("--width", type=int, help="channel width of the widest conv layer (default 256)")
    g = p.add_argument_group("optimization")
    g.add_argument("--lr", type=float)
    g.add_argument("--lr-azimuth", type=float)
    g.add_argument("--beta1", type=float)
    g.add_argument("--beta2", type=float)
    g.add_argument("--azimuth-steps", type=int)
    g.add_argument("--steps", type=int, default=1000)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--checkpoint-every", type=int, default=0)
    g = p.add_argument_group("data and files")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dataset", default="synthetic", choices=["mnist", "fashion", "synthetic", "mixed"])
    g.add_argument("--data-dir")
    g.add_argument("--limit", type=int, help="use only the first N images")
    g.add_argument("--shape", default="cross", choices=["cube", "sphere", "cross", "chair"])
    g.add_argument("--n-shapes", type=int, default=8)
    g.add_argument("--out-dir", default="out")
    g.add_argument("--checkpoint", help="checkpoint to load (default <out-dir>/checkpoint.v3da)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="artifact", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model").add_argument(
        "--plot", action="store_true", help="also write loss_curves.png")
    p = sub.add_parser("reconstruct", parents=[common], help="input / projection / texture triptychs")
    p.add_argument("--input", help="PGM image or IDX file (default: images from --dataset)")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--count", type=int, default=8)
    p = sub.add_parser("sample", parents=[common], help="decode z ~ N(0, I) at elevations 0 and 30")
    p.add_argument("--count", type=int, default=16)
    p = sub.add_parser("sweep", parents=[common], help="64-step azimuth sweep and elevation stills")
    p.add_argument("--input")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--from-prior", action="store_true")
    p = sub.add_parser("export-voxels", parents=[common], help="voxel grid and point list")
    p.add_argument("--input")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--z", help="comma-separated latent code instead of an input image")
    p.add_argument("--threshold", type=float, default=0.5)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every operation")
    sub.add_parser("report", parents=[common], help="plot loss curves from <out-dir>/metrics.tsv")
    return parser


# -- helpers ------------------------------------------------------------------------------

def emit(command: str, items: dict, out=None) -> None:
    out = out or sys.stdout
    print(f"begin\t{command}", file=out)
    for k, v in items.items():
        print(f"{k}\t{v}", file=out)
    print(f"end\t{command}", file=out)


def config_from_args(args) -> ModelConfig:
    kw = {field: getattr(args, flag) for flag, field in MODEL_FLAGS.items() if getattr(args, flag) is not None}
    return ModelConfig(seed=args.seed, **kw)


def load_model(args) -> Model3D:
    """Load the checkpoint and refuse model flags that contradict its config."""
    path = Path(args.checkpoint or Path(args.out_dir) / "checkpoint.v3da")
    if not path.exists():
        raise CliError(f"checkpoint not found: {path}")
    model, _, _ = persistence.load_checkpoint(path)
    cfg = model.config
    for flag, field in MODEL_FLAGS.items():
        given = getattr(args, flag)
        if given is None:
            continue
        if flag == "objective":
            given = given.replace("-", "_")
        if flag == "azimuth":
            given = parse_mode(given)
        if given != getattr(cfg, field):
            raise CliError(f"--{flag.replace('_', '-')} {getattr(args, flag)} contradicts the checkpoint "
                           f"({field}={getattr(cfg, field)!r})")
    return model


def load_inputs(args, count: int) -> np.ndarray:
    if args.input:
        path = Path(args.input)
        if path.suffix == ".pgm":
            images = persistence.read_pgm(path)[None]
        else:
            images = load_idx(path).images
    else:
        ds = load_named(args.dataset, args.data_dir, args.limit, NoiseSource(args.seed), args.shape, args.n_shapes)
        images = ds.images
    sel = images[args.index:args.index + count]
    if len(sel) == 0:
        raise CliError(f"no input image at index {args.index}")
    return sel.astype(np.float32)


def render_views(model: Model3D, voxels: np.ndarray, thetas, phi_deg: float = 0.0) -> np.ndarray:
    """Render one grid per theta (grids broadcast if a single grid is given)."""
    thetas = np.asarray(thetas, dtype=np.float64)
    grids = np.broadcast_to(voxels, (len(thetas),) + voxels.shape[-3:]).astype(model.dtype)
    return render(Tensor(grids), thetas, math.radians(phi_deg), model.config.sampling_mode).data


def sweep_angles(steps: int = SWEEP_STEPS) -> np.ndarray:
    return -math.pi + 2 * math.pi * np.arange(steps) / steps


# -- commands --------------------------------------------------------------------------------

def cmd_train(args) -> dict:
    cfg = config_from_args(args)
    ds = load_named(args.dataset, args.data_dir, args.limit, NoiseSource(args.seed), args.shape, args.n_shapes)
    model = Model3D(cfg)
    res = train(model, ds, args.steps, args.batch_size, args.out_dir, args.seed, args.checkpoint_every)
    items = {"images": len(ds), "steps": len(res.history), "checkpoint": res.checkpoint,
             "metrics": Path(args.out_dir) / METRICS_NAME, "seconds": f"{res.seconds:.1f}"}
    if res.history:
        last = res.history[-1]
        items.update({k: f"{last[k]:.6g}" for k in ("recon", "reg", "total", "disc_acc", "z_mean_norm")})
        means = epoch_means(res.history)
        items["epochs"] = len(means)
        items["recon_first_epoch"] = f"{means[0]:.6g}"
        items["recon_last_epoch"] = f"{means[-1]:.6g}"
        items["batches_per_epoch"] = batches_per_epoch(len(ds), args.batch_size)
    if args.plot and res.history:
        from .plotting import plot_losses, read_metrics
        items["figure"] = plot_losses(read_metrics(Path(args.out_dir) / METRICS_NAME),
                                      Path(args.out_dir) / "loss_curves.png")
    return items


def cmd_reconstruct(args) -> dict:
    model = load_model(args)
    x = load_inputs(args, args.count)
    rec = model.reconstruct(x)
    cols = [x, rec["projection"]] + ([rec["texture"]] if rec["texture"] is not None else [])
    tiles = np.stack(cols, axis=1).reshape(-1, *x.shape[1:])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "reconstruct.pgm"
    persistence.write_pgm(path, persistence.tile(tiles, len(cols)))
    return {"image": path, "rows": len(x), "columns": len(cols),
            "mse_projection": f"{float(np.mean((rec['projection'] - x) ** 2)):.6g}"}


def cmd_sample(args) -> dict:
    model = load_model(args)
    s = model.sample_prior(args.count, NoiseSource(args.seed))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = {"count": args.count}
    cols = int(math.ceil(math.sqrt(args.count)))
    for elev in (0, 30):
        imgs = render(Tensor(s["voxels"]), s["theta"], math.radians(elev), model.config.sampling_mode).data
        path = out / f"samples_elev{elev}.pgm"
        persistence.write_pgm(path, persistence.tile(imgs, cols))
        items[f"image_elev{elev}"] = path
    return items


def _single_grid(model: Model3D, args) -> tuple[np.ndarray, float]:
    """Decoded grid and its display azimuth, from an input image, a latent code or the prior."""
    if getattr(args, "z", None):
        z = np.array([float(v) for v in args.z.split(",")], dtype=model.dtype)
        if z.size != model.config.dz:
            raise CliError(f"--z has {z.size} values, the model has dz={model.config.dz}")
        return model.decode_eval(z)[0], 0.0
    if getattr(args, "from_prior", False):
        s = model.sample_prior(1, NoiseSource(args.seed))
        return s["voxels"][0], float(s["theta"][0])
    rec = model.reconstruct(load_inputs(args, 1))
    return rec["voxels"][0], float(np.asarray(rec["theta"]).reshape(-1)[0])


def cmd_sweep(args) -> dict:
    model = load_model(args)
    grid, theta0 = _single_grid(model, args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    views = render_views(model, grid, sweep_angles())
    path = out / "sweep.pgm"
    persistence.write_pgm(path, persistence.tile(views, 8))
    stills = np.concatenate([render_views(model, grid, [theta0], e) for e in ELEVATIONS])
    still_path = out / "elevations.pgm"
    persistence.write_pgm(still_path, persistence.tile(stills, len(ELEVATIONS)))
    return {"image": path, "tiles": SWEEP_STEPS, "elevations": still_path,
            "elevation_degrees": ",".join(f"{e:g}" for e in ELEVATIONS)}


def cmd_export_voxels(args) -> dict:
    model = load_model(args)
    grid, _ = _single_grid(model, args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vox, pts = out / "voxels.vox", out / "points.txt"
    persistence.write_voxels(vox, grid)
    n = persistence.write_points(pts, grid, args.threshold)
    return {"voxels": vox, "points": pts, "point_count": n, "threshold": args.threshold}


def cmd_gradcheck(args) -> dict:
    reports = gradcheck.run(args.seed)
    items = {r.name: f"{r.error:.3e}\t{'pass' if r.passed else 'FAIL'}" for r in reports}
    items["failed"] = sum(not r.passed for r in reports)
    return items


def cmd_report(args) -> dict:
    from .plotting import plot_losses, read_metrics
    metrics_path = Path(args.out_dir) / METRICS_NAME
    if not metrics_path.exists():
        raise CliError(f"no metrics log at {metrics_path}")
    metrics = read_metrics(metrics_path)
    fig = plot_losses(metrics, Path(args.out_dir) / "loss_curves.png")
    return {"figure": fig, "steps": len(metrics["step"]),
            "recon_final": f"{metrics['recon'][-1]:.6g}", "reg_final": f"{metrics['reg'][-1]:.6g}"}


COMMANDS = {
    "train": cmd_train, "reconstruct": cmd_reconstruct, "sample": cmd_sample, "sweep": cmd_sweep,
    "export-voxels": cmd_export_voxels, "gradcheck": cmd_gradcheck, "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        items = COMMANDS[args.command](args)
    except (ConfigError, CliError, persistence.CheckpointError, FileNotFoundError) as exc:
        parser.error(str(exc))
    emit(args.command, items)
    if args.command == "gradcheck" and items["failed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
