"""File formats: checkpoints, PGM images and voxel grids.

Checkpoint layout (all integers little-endian)::

    b"V3DA"  u32 version
    u32 n, n bytes   model config as JSON
    u32 n, n bytes   metadata JSON (training step, optimizer step counts)
    u32 entry count
    per entry: u16 name length, name (utf-8), u8 dtype (0 = f32, 1 = f64),
               u8 rank, rank * u32 dims, payload (little-endian floats, C order)

Entry names are ``param/<name>``, ``buffer/<name>`` and ``optim/<optimizer>/<m|v>.<name>``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import Model3D, ModelConfig

MAGIC = b"V3DA"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


def _write_block(fh, data: bytes) -> None:
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"checkpoint truncated: wanted {n} bytes, got {len(data)}")
    return data


def write_entries(path, config_json: str, meta: dict, entries: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_block(fh, config_json.encode())
        _write_block(fh, json.dumps(meta, sort_keys=True).encode())
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            arr = np.asarray(arr)
            code = _CODES.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            raw_name = name.encode()
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_entries(path) -> tuple[str, dict, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        config_json = _read_exact(fh, n).decode()
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = json.loads(_read_exact(fh, n).decode())
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        entries = {}
        for _ in range(count):
            (ln,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, ln).decode()
            code, rank = struct.unpack("<BB", _read_exact(fh, 2))
            if code not in _DTYPES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            dt = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            arr = np.frombuffer(_read_exact(fh, nbytes), dtype=dt).reshape(dims)
            entries[name] = arr.astype(dt.newbyteorder("="))
    return config_json, meta, entries


def save_checkpoint(path, model: Model3D, optimizers: dict | None = None, step: int = 0) -> None:
    entries = {f"param/{name}": p.data for name, p in model.named_parameters()}
    entries.update({f"buffer/{name}": b for name, b in model.named_buffers()})
    meta = {"step": int(step), "optimizer_steps": {}}
    for key, opt in (optimizers or {}).items():
        if opt is None:
            continue
        meta["optimizer_steps"][key] = opt.t
        for name, arr in opt.state_arrays().items():
            entries[f"optim/{key}/{name}"] = arr
    write_entries(path, model.config.to_json(), meta, entries)


def load_into(model: Model3D, entries: dict) -> None:
    """Copy parameters and buffers into ``model``; names and shapes must match."""
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    stored_p = {k[6:] for k in entries if k.startswith("param/")}
    stored_b = {k[7:] for k in entries if k.startswith("buffer/")}
    if stored_p != set(params) or stored_b != set(buffers):
        missing = sorted(set(params) - stored_p)
        extra = sorted(stored_p - set(params))
        raise CheckpointError(f"checkpoint does not match model: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in params.items():
        arr = entries[f"param/{name}"]
        if arr.shape != p.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} in checkpoint, model has {p.shape}")
        p.data[...] = arr
    for name, b in buffers.items():
        b[...] = entries[f"buffer/{name}"]


def load_checkpoint(path) -> tuple[Model3D, dict, dict]:
    """Rebuild the model from its stored config and restore its state.

    Returns the model, the metadata and the raw entry table (for optimizer state).
    """
    config_json, meta, entries = read_entries(path)
    model = Model3D(ModelConfig.from_json(config_json))
    load_into(model, entries)
    return model, meta, entries


def restore_optimizer(opt, key: str, meta: dict, entries: dict) -> None:
    prefix = f"optim/{key}/"
    arrays = {k[len(prefix):]: v for k, v in entries.items() if k.startswith(prefix)}
    opt.load_state_arrays(arrays, meta["optimizer_steps"][key])


# -- images -------------------------------------------------------------------------------

def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) from a 2-D array in [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    pixels = img if img.dtype == np.uint8 else to_bytes(img)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM written by :func:`write_pgm`; returns floats in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    pixels = np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w) / 255.0


def tile(images, cols: int, pad: int = 0) -> np.ndarray:
    """Lay out ``[K, h, w]`` images row-major on a grid ``cols`` wide."""
    images = np.asarray(images)
    k, h, w = images.shape
    rows = -(-k // cols)
    sheet = np.zeros((rows * (h + pad) - pad, cols * (w + pad) - pad), dtype=images.dtype)
    for i in range(k):
        r, c = divmod(i, cols)
        sheet[r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = images[i]
    return sheet


# -- voxel grids ------------------------------------------------------------------------------

def write_voxels(path, grid: np.ndarray) -> None:
    """Header line ``voxgrid D H W f32`` then raw little-endian floats, depth-major."""
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValueError(f"expected a [D, H, W] grid, got shape {grid.shape}")
    d, h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"voxgrid {d} {h} {w} f32\n".encode())
        fh.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def read_voxels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    parts = raw[:nl].decode().split()
    if len(parts) != 5 or parts[0] != "voxgrid" or parts[4] != "f32":
        raise ValueError(f"{path}: bad voxel header {raw[:nl]!r}")
    d, h, w = (int(p) for p in parts[1:4])
    data = np.frombuffer(raw[nl + 1:], dtype="<f4")
    if data.size != d * h * w:
        raise ValueError(f"{path}: expected {d * h * w} values, found {data.size}")
    return data.reshape(d, h, w).astype(np.float32)


def write_points(path, grid: np.ndarray, threshold: float = 0.5) -> int:
    """ASCII list of occupied cells (value > threshold), one ``d h w`` per line."""
    pts = np.argwhere(np.asarray(grid) > threshold)
    with open(path, "w") as fh:
        fh.write(f"# {len(pts)} points, threshold {threshold}, columns: d h w\n")
        for d, h, w in pts:
            fh.write(f"{d} {h} {w}\n")
    return len(pts)


def read_points(path) -> np.ndarray:
    rows = [line.split() for line in Path(path).read_text().splitlines() if line and not line.startswith("#")]
    return np.array(rows, dtype=np.int64).reshape(-1, 3)
