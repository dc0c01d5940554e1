"""Differentiable voxel renderer: rotate a grid by (azimuth, elevation), then
project it orthographically along the depth axis.

Grids are indexed ``(d, h, w)`` (depth, height, width) and batched as
``[B, N, N, N]``. Rotation is about the grid center ``(N - 1) / 2``.

Pose convention, with offsets ``z = d - c``, ``y = h - c``, ``x = w - c``:
the object is first turned by the azimuth ``theta`` about the height axis,

    x' = cos(theta) x - sin(theta) z,   z' = sin(theta) x + cos(theta) z,

so a positive azimuth carries the +w axis toward +d (counterclockwise when
looking down the height axis from the low-``h`` side), then tilted by the
elevation ``phi`` about the width axis,

    y'' = cos(phi) y - sin(phi) z',     z'' = sin(phi) y + cos(phi) z'.

``nearest`` mode gathers: each output cell reads the input at the inverse
rotated coordinate rounded with ``floor(coord + 0.5)``. Its gradient with
respect to the angles is zero. ``trilinear`` mode splats: each input voxel is
moved to its rotated position and its value shared among the 8 surrounding
cells with trilinear weights, which keeps the total mass of in-bounds voxels
and is differentiable in the angles. Samples falling outside the grid are empty.
"""
from __future__ import annotations

import math

import numpy as np

from .autodiff import EXP_CLAMP, Tensor, as_tensor, make_result, reduce

RESOLUTION = 28
MODES = ("nearest", "trilinear")
_SNAP = 1e-12


def wrap_angle(angle):
    """Map angles into ``[-pi, pi)``."""
    a = np.asarray(angle, dtype=np.float64)
    return a - 2 * math.pi * np.floor((a + math.pi) / (2 * math.pi))


def _trig(angle: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # snap values within 1e-12 of -1, 0 or 1 so lattice angles rotate exactly
    a = wrap_angle(angle)
    c, s = np.cos(a), np.sin(a)
    for v in (c, s):
        r = np.round(v)
        near = np.abs(v - r) < _SNAP
        v[near] = r[near]
    return c, s


def _offsets(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = (n - 1) / 2.0
    idx = np.arange(n, dtype=np.float64) - c
    z, y, x = np.meshgrid(idx, idx, idx, indexing="ij")
    return z.reshape(-1), y.reshape(-1), x.reshape(-1)


def _angles(angle, batch: int, dtype) -> Tensor:
    if isinstance(angle, Tensor):
        if angle.shape == (batch,):
            return angle
        if angle.requires_grad:
            raise ValueError(f"pose tensor must have shape ({batch},), got {angle.shape}")
        angle = angle.data
    return Tensor(np.broadcast_to(np.asarray(angle, dtype=dtype), (batch,)).copy(), dtype=dtype)


def rotate_voxels(v: Tensor, theta=0.0, phi=0.0, mode: str = "nearest") -> Tensor:
    """Rotate a grid (``[N, N, N]``) or batch of grids (``[B, N, N, N]``).

    ``theta`` and ``phi`` are scalars or per-example tensors of shape ``[B]``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown sampling mode {mode!r}; choose from {MODES}")
    v = as_tensor(v)
    single = v.ndim == 3
    if single:
        v = v.reshape(1, *v.shape)
    if v.ndim != 4 or not (v.shape[1] == v.shape[2] == v.shape[3]):
        raise ValueError(f"expected cubic voxel grids [B, N, N, N], got {v.shape}")
    B, n = v.shape[0], v.shape[1]
    th = _angles(theta, B, v.dtype)
    ph = _angles(phi, B, v.dtype)
    if mode == "nearest":
        out = _rotate_nearest(v, th, ph)
    else:
        out = _rotate_trilinear(v, th, ph)
    return out.reshape(n, n, n) if single else out


def _rotate_nearest(v: Tensor, th: Tensor, ph: Tensor) -> Tensor:
    B, n = v.shape[0], v.shape[1]
    M = n ** 3
    c = (n - 1) / 2.0
    idx = np.arange(n, dtype=np.float64) - c
    z, y, x = idx[:, None, None], idx[None, :, None], idx[None, None, :]
    ct, st = (a[:, None, None, None] for a in _trig(th.data))
    cp, sp = (a[:, None, None, None] for a in _trig(ph.data))
    # undo elevation, then azimuth; without elevation the height index is untouched
    if sp.any():
        y1 = cp * y + sp * z
        z1 = -sp * y + cp * z
    else:
        y1, z1 = y[None], cp * z
    x0 = ct * x + st * z1
    z0 = -st * x + ct * z1
    iz = np.floor(z0 + c + 0.5).astype(np.int64)
    iy = np.floor(y1 + c + 0.5).astype(np.int64)
    ix = np.floor(x0 + c + 0.5).astype(np.int64)
    valid = (iz >= 0) & (iz < n) & (iy >= 0) & (iy < n) & (ix >= 0) & (ix < n)
    valid = np.broadcast_to(valid, (B, n, n, n)).reshape(B, M)
    lin = (iz * n + iy) * n + ix + np.arange(B)[:, None, None, None] * M
    src = np.broadcast_to(lin, (B, n, n, n)).reshape(B, M)[valid]
    flat = v.data.reshape(-1)
    out = np.zeros((B, M), dtype=v.dtype)
    out[valid] = flat[src]

    def bw(g):
        gv = np.bincount(src, weights=g.reshape(B, M)[valid], minlength=B * M)
        zero = np.zeros(B, dtype=v.dtype)
        return gv.astype(v.dtype).reshape(v.shape), zero, zero

    return make_result(out.reshape(v.shape), "rotate_nearest", (v, th, ph), bw)


def _rotate_trilinear(v: Tensor, th: Tensor, ph: Tensor) -> Tensor:
    B, n = v.shape[0], v.shape[1]
    M = n ** 3
    c = (n - 1) / 2.0
    z, y, x = _offsets(n)
    ct, st = (a[:, None] for a in _trig(th.data))
    cp, sp = (a[:, None] for a in _trig(ph.data))
    xr = ct * x - st * z
    zr = st * x + ct * z
    yr2 = cp * y - sp * zr
    zr2 = sp * y + cp * zr
    tz, ty, tx = zr2 + c, np.broadcast_to(yr2 + c, (B, M)), np.broadcast_to(xr + c, (B, M))
    iz, iy, ix = np.floor(tz), np.floor(ty), np.floor(tx)
    fz, fy, fx = tz - iz, ty - iy, tx - ix
    iz, iy, ix = iz.astype(np.int64), iy.astype(np.int64), ix.astype(np.int64)
    base = np.arange(B)[:, None] * M
    vals = v.data.reshape(B, M).astype(np.float64)

    # an upper corner with zero weight everywhere only matters for angle gradients
    grad_t, grad_p = th.requires_grad, ph.requires_grad
    upper_z = fz.any() or grad_t or grad_p
    upper_y = fy.any() or grad_p or (grad_t and sp.any())
    upper_x = fx.any() or grad_t
    corners = []
    for a in (0, 1):
        if a and not upper_z:
            continue
        wz = fz if a else 1 - fz
        cz = iz + a
        for b in (0, 1):
            if b and not upper_y:
                continue
            wy = fy if b else 1 - fy
            cy = iy + b
            for cc in (0, 1):
                if cc and not upper_x:
                    continue
                wx = fx if cc else 1 - fx
                cx = ix + cc
                valid = (cz >= 0) & (cz < n) & (cy >= 0) & (cy < n) & (cx >= 0) & (cx < n)
                dst = (base + (cz * n + cy) * n + cx)[valid]
                corners.append((a, b, cc, wz, wy, wx, valid, dst))

    out = np.zeros(B * M, dtype=np.float64)
    for a, b, cc, wz, wy, wx, valid, dst in corners:
        out += np.bincount(dst, weights=(wz * wy * wx * vals)[valid], minlength=B * M)

    def bw(g):
        gflat = g.reshape(-1).astype(np.float64)
        gv = np.zeros((B, M), dtype=np.float64)
        dz = np.zeros((B, M))  # d(out . g)/d(target z) per source voxel, before weighting by value
        dy = np.zeros((B, M))
        dx = np.zeros((B, M))
        for a, b, cc, wz, wy, wx, valid, dst in corners:
            gc = np.zeros((B, M))
            gc[valid] = gflat[dst]
            gv += wz * wy * wx * gc
            dz += (1 if a else -1) * wy * wx * gc
            dy += (1 if b else -1) * wz * wx * gc
            dx += (1 if cc else -1) * wz * wy * gc
        # rotated coordinates as functions of the angles
        dth = vals * (dz * (cp * xr) + dy * (-sp * xr) + dx * (-zr))
        dph = vals * (dz * yr2 + dy * (-zr2))
        return (gv.astype(v.dtype).reshape(v.shape),
                dth.sum(axis=1).astype(v.dtype),
                dph.sum(axis=1).astype(v.dtype))

    return make_result(out.astype(v.dtype).reshape(v.shape), "rotate_trilinear", (v, th, ph), bw)


def project(v: Tensor) -> Tensor:
    """Image ``1 - exp(-sum_d v)`` with rays running along the depth axis."""
    v = as_tensor(v)
    if v.ndim not in (3, 4):
        raise ValueError(f"expected [N, N, N] or [B, N, N, N] voxels, got {v.shape}")
    return _opacity(reduce("sum", v, axes=v.ndim - 3))


def _opacity(ray_sum: Tensor) -> Tensor:
    # 1 - exp(-s) via expm1, capped just below 1 so float32 keeps pixels in [0, 1)
    s = ray_sum.data
    trans = np.exp(np.minimum(-s, EXP_CLAMP))
    data = np.minimum(-np.expm1(-s), np.nextafter(s.dtype.type(1), s.dtype.type(0)))

    def bw(g):
        return (g * trans,)

    return make_result(data.astype(s.dtype, copy=False), "opacity", (ray_sum,), bw)


def render(v: Tensor, theta=0.0, phi=0.0, mode: str = "nearest") -> Tensor:
    """Rotate then project. Identity poses skip the resampling step."""
    if _is_identity(theta) and _is_identity(phi):
        return project(v)
    return project(rotate_voxels(v, theta, phi, mode))


def _is_identity(angle) -> bool:
    if isinstance(angle, Tensor):
        if angle.requires_grad:
            return False
        angle = angle.data
    return bool(np.all(wrap_angle(angle) == 0))
