"""Adam and the split between main and azimuth parameter sets."""
from __future__ import annotations

import hashlib
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Parameter


class OptimizerError(RuntimeError):
    pass


class Adam:
    """Bias-corrected Adam over a fixed list of parameters.

    Moments are kept per parameter in the parameter's dtype. ``update_counts``
    records how many times each parameter has been stepped.
    """

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip: float | None = None, name: str = "adam"):
        self.params = list(params)
        ids = [id(p) for p in self.params]
        if len(set(ids)) != len(ids):
            raise OptimizerError(f"{name}: a parameter is registered twice")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip = clip
        self.name = name
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.update_counts = [0] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        missing = [p.name or f"#{i}" for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise OptimizerError(f"{self.name}: no gradient for {', '.join(missing)}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if self.clip is not None:
                g = np.clip(g, -self.clip, self.clip)
            m, v = self.m[i], self.v[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.lr != 0:
                step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
                p.data -= step.astype(p.dtype, copy=False)
            self.update_counts[i] += 1

    # -- persistence -------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"m.{p.name}"] = m
            out[f"v.{p.name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for i, p in enumerate(self.params):
            self.m[i][...] = arrays[f"m.{p.name}"]
            self.v[i][...] = arrays[f"v.{p.name}"]
        self.t = int(t)


def checksum(params: Iterable[Parameter]) -> str:
    """SHA-256 over the raw bytes of ``params`` in order."""
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


class DualOptimizer:
    """Two Adam instances over disjoint parameter sets.

    ``phase`` selects which one steps: ``"main"``, ``"azimuth"`` or ``"both"``.
    The other set is left untouched (frozen).
    """

    PHASES = ("main", "azimuth", "both")

    def __init__(self, main: Adam, azimuth: Adam | None):
        self.main = main
        self.azimuth = azimuth
        if azimuth is not None:
            overlap = {id(p) for p in main.params} & {id(p) for p in azimuth.params}
            if overlap:
                names = [p.name for p in main.params if id(p) in overlap]
                raise OptimizerError(f"parameters registered with both optimizers: {names}")

    def step(self, phase: str = "both") -> None:
        dual_optimizer_step(self.main, self.azimuth, phase)

    def zero_grad(self) -> None:
        self.main.zero_grad()
        if self.azimuth is not None:
            self.azimuth.zero_grad()


def dual_optimizer_step(main: Adam, azim: Adam | None, phase: str = "both") -> None:
    if phase not in DualOptimizer.PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    if phase in ("main", "both"):
        main.step()
    if phase in ("azimuth", "both") and azim is not None:
        azim.step()
