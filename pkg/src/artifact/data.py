"""Image datasets: IDX files (MNIST / Fashion-MNIST), procedurally generated
voxel shapes rendered from 12 azimuths, and shuffled batching.
"""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .objectives import NoiseSource
from .render import RESOLUTION, project, rotate_voxels

IDX_UBYTE_3D = 0x00000803
SHAPES = ("cube", "sphere", "cross", "chair")
N_VIEWS = 12
VIEW_ANGLES = np.arange(N_VIEWS) * (2 * math.pi / N_VIEWS)  # 0, 30, ..., 330 degrees

IDX_NAMES = {
    "mnist": ("train-images-idx3-ubyte", "train-images-idx3-ubyte.gz"),
    "fashion": ("train-images-idx3-ubyte", "train-images-idx3-ubyte.gz"),
}


class IdxFormatError(ValueError):
    pass


@dataclass
class ImageDataset:
    images: np.ndarray  # [N, H, W] float32 in [0, 1]
    source: str
    poses: np.ndarray | None = None  # azimuth label per image, never used for training

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, n: int) -> "ImageDataset":
        poses = None if self.poses is None else self.poses[:n]
        return ImageDataset(self.images[:n], self.source, poses)


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def load_idx(path) -> ImageDataset:
    """Read an unsigned-byte, 3-D IDX file (big-endian header) into [0, 1] floats."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise IdxFormatError(f"{path}: header needs 16 bytes, file has {len(raw)}")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_UBYTE_3D:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_UBYTE_3D:08x}")
    expected = n * rows * cols
    payload = raw[16:]
    if len(payload) != expected:
        kind = "truncated" if len(payload) < expected else "oversized"
        raise IdxFormatError(f"{path}: {kind} payload, expected {expected} bytes for "
                             f"{n}x{rows}x{cols}, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols)
    return ImageDataset((pixels / 255.0).astype(np.float32), "idx")


def write_idx(path, images: np.ndarray) -> None:
    """Write ``[N, rows, cols]`` images as an unsigned-byte IDX file.

    Float input in [0, 1] is scaled to bytes; uint8 input is written as is.
    """
    images = np.asarray(images)
    if images.ndim != 3:
        raise ValueError(f"expected [N, rows, cols], got shape {images.shape}")
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    header = struct.pack(">IIII", IDX_UBYTE_3D, *images.shape)
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + images.tobytes())


# -- synthetic shapes ----------------------------------------------------------------

def _axes(n: int):
    c = (n - 1) / 2.0
    idx = np.arange(n) - c
    return np.meshgrid(idx, idx, idx, indexing="ij")  # z (depth), y (height), x (width)


def _box(n, z, y, x, half_d, half_h, half_w, dy=0.0, dz=0.0, dx=0.0):
    return (np.abs(z - dz) < half_d) & (np.abs(y - dy) < half_h) & (np.abs(x - dx) < half_w)


def cube(n: int = RESOLUTION, side: int = 8, dy: float = 0.0) -> np.ndarray:
    """Axis-aligned cube of ``side`` voxels centered in the grid (shifted ``dy`` in height)."""
    z, y, x = _axes(n)
    h = side / 2.0
    return _box(n, z, y, x, h, h, h, dy=dy).astype(np.float32)


def sphere(n: int = RESOLUTION, radius: float = 7.0, dy: float = 0.0) -> np.ndarray:
    z, y, x = _axes(n)
    return (z * z + (y - dy) ** 2 + x * x <= radius * radius).astype(np.float32)


def cross(n: int = RESOLUTION, arm: float = 10.0, thick: float = 4.0, dy: float = 0.0) -> np.ndarray:
    """Three orthogonal bars through the center."""
    z, y, x = _axes(n)
    t = thick / 2.0
    grid = (_box(n, z, y, x, arm, t, t, dy=dy) | _box(n, z, y, x, t, arm, t, dy=dy)
            | _box(n, z, y, x, t, t, arm, dy=dy))
    return grid.astype(np.float32)


def chair(n: int = RESOLUTION, size: float = 10.0, dy: float = 0.0) -> np.ndarray:
    """Seat, a backrest on the -depth side, four legs and a single armrest on
    the +width side, so no two of the 12 views coincide (not even mirrored ones)."""
    z, y, x = _axes(n)
    s = size
    seat = _box(n, z, y, x, s / 2, 1.0, s / 2, dy=dy + 1.0)
    back = _box(n, z, y, x, 1.0, s / 2, s / 2, dy=dy - s / 2, dz=-s / 2 + 1.0)
    arm = _box(n, z, y, x, s / 2, 1.0, 1.0, dy=dy - s / 4, dx=s / 2 + 1.0)
    legs = np.zeros_like(seat)
    for sz in (-1, 1):
        for sx in (-1, 1):
            legs |= _box(n, z, y, x, 1.0, s / 4, 1.0, dy=dy + 1.0 + s / 4,
                         dz=sz * (s / 2 - 1.0), dx=sx * (s / 2 - 1.0))
    return (seat | back | arm | legs).astype(np.float32)


def render_views(grid: np.ndarray, angles=VIEW_ANGLES, mode: str = "nearest") -> np.ndarray:
    """Project one grid from each azimuth in ``angles``; returns ``[len(angles), N, N]``."""
    angles = np.asarray(angles, dtype=np.float64)
    batch = Tensor(np.broadcast_to(grid, (len(angles),) + grid.shape).copy())
    return project(rotate_voxels(batch, angles, 0.0, mode)).data


@dataclass
class SyntheticShapeSet:
    grids: np.ndarray  # [S, N, N, N] binary
    thetas: np.ndarray  # [12] radians
    images: np.ndarray  # [S, 12, N, N]
    shape: str
    params: list = field(default_factory=list)

    def as_image_dataset(self) -> ImageDataset:
        S, V, n, _ = self.images.shape
        return ImageDataset(self.images.reshape(S * V, n, n).astype(np.float32), "synthetic",
                            np.tile(self.thetas, S))


def make_synthetic(shape: str, n_shapes: int, noise: NoiseSource, n: int = RESOLUTION) -> SyntheticShapeSet:
    """Random-size shapes, vertically offset, each rendered from 12 azimuths.

    Shapes stay centered in the horizontal plane so they sit on the rotation axis.
    """
    if shape not in SHAPES:
        raise ValueError(f"unknown shape {shape!r}; choose from {SHAPES}")
    if n_shapes < 1:
        raise ValueError("n_shapes must be >= 1")
    grids, params = [], []
    for _ in range(n_shapes):
        dy = float(noise.rng.integers(-2, 3))
        if shape == "cube":
            p = {"side": int(noise.rng.integers(6, 13)), "dy": dy}
            g = cube(n, **p)
        elif shape == "sphere":
            p = {"radius": float(noise.rng.uniform(4.0, 9.0)), "dy": dy}
            g = sphere(n, **p)
        elif shape == "cross":
            p = {"arm": float(noise.rng.integers(7, 12)), "thick": float(noise.rng.integers(3, 6)), "dy": dy}
            g = cross(n, **p)
        else:
            p = {"size": float(noise.rng.integers(8, 13)), "dy": dy}
            g = chair(n, **p)
        grids.append(g)
        params.append(p)
    grids = np.stack(grids)
    images = np.stack([render_views(g) for g in grids]).astype(np.float32)
    return SyntheticShapeSet(grids, VIEW_ANGLES.copy(), images, shape, params)


# -- loading and batching --------------------------------------------------------------

def concat(datasets: list) -> ImageDataset:
    images = np.concatenate([d.images for d in datasets])
    return ImageDataset(images, "mixed")


def load_named(name: str, data_dir=None, limit: int | None = None, noise: NoiseSource | None = None,
               shape: str = "cross", n_shapes: int = 8) -> ImageDataset:
    """Load ``mnist``, ``fashion``, ``synthetic`` or ``mixed`` (all three concatenated).

    IDX datasets are read from ``<data_dir>/<name>/train-images-idx3-ubyte[.gz]``.
    """
    if name == "synthetic":
        noise = noise or NoiseSource(0)
        ds = make_synthetic(shape, n_shapes, noise).as_image_dataset()
    elif name in IDX_NAMES:
        if data_dir is None:
            raise FileNotFoundError(f"--data-dir is required for the {name} dataset")
        folder = Path(data_dir) / name
        for fname in IDX_NAMES[name]:
            if (folder / fname).exists():
                ds = load_idx(folder / fname)
                ds.source = name
                break
        else:
            raise FileNotFoundError(f"no {' or '.join(IDX_NAMES[name])} in {folder}")
    elif name == "mixed":
        parts = [load_named(n, data_dir, limit, noise, shape, n_shapes) for n in ("mnist", "fashion", "synthetic")]
        return concat(parts)
    else:
        raise ValueError(f"unknown dataset {name!r}")
    return ds.subset(limit) if limit else ds


def epoch_order(n: int, noise: NoiseSource) -> np.ndarray:
    return noise.permutation(n)


def batches(dataset: ImageDataset, batch_size: int,
            noise: NoiseSource) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
    """Endless stream of ``(epoch, indices, images)``.

    Each epoch is one shuffled pass; the short final batch is dropped. Emitted
    image arrays are read-only copies.
    """
    n = len(dataset)
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 (batchnorm needs batch statistics)")
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    epoch = 0
    while True:
        order = epoch_order(n, noise)
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start:start + batch_size]
            images = dataset.images[idx]
            images.flags.writeable = False
            yield epoch, idx, images
        epoch += 1


def batches_per_epoch(n: int, batch_size: int) -> int:
    return n // batch_size
