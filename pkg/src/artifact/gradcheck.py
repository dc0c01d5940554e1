"""Finite-difference checks for every differentiable operation, in float64.

Each case builds a small random problem and reduces the operation's output to
a scalar through a fixed random weighting, so every output element matters.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check, precision
from .nn import BatchNorm, Conv2D, Deconv3D, Dense, center_crop, conv2d, deconv3d
from .objectives import (GaussianLatent, aae_losses, batch_mean_penalty, beta_vae_loss,
                         kl_standard_normal, mse, recon_two_term)
from .render import project, rotate_voxels

TOLERANCE = 1e-4


@dataclass
class GradCase:
    name: str
    f: Callable
    inputs: list


@dataclass
class GradReport:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _weighted(rng, f):
    """Wrap ``f`` so its (array) output is reduced by a fixed random weighting."""
    cache = {}

    def g(*xs):
        out = f(*xs)
        if "w" not in cache:
            cache["w"] = Tensor(rng.normal(size=out.shape))
        return (out * cache["w"]).sum()
    return g


def cases(seed: int = 0) -> list[GradCase]:
    rng = np.random.default_rng(seed)
    t = lambda *shape, scale=1.0: Tensor(rng.normal(size=shape) * scale)
    out = []
    W = lambda f: _weighted(rng, f)

    # elementwise, shape and reduction primitives
    out.append(GradCase("add_broadcast", W(lambda a, b: a + b), [t(3, 4), t(4)]))
    out.append(GradCase("mul_broadcast", W(lambda a, b: a * b), [t(3, 4), t(3, 1)]))
    out.append(GradCase("div", W(lambda a, b: a / b), [t(3, 4), Tensor(rng.uniform(0.5, 2.0, (3, 4)))]))
    out.append(GradCase("exp", W(ad.exp), [t(5)]))
    out.append(GradCase("log", W(ad.log), [Tensor(rng.uniform(0.5, 3.0, 5))]))
    out.append(GradCase("square", W(ad.square), [t(5)]))
    out.append(GradCase("matmul", W(ad.matmul), [t(3, 4), t(4, 2)]))
    out.append(GradCase("sum_axis", W(lambda a: a.sum(axis=1)), [t(3, 4, 2)]))
    out.append(GradCase("mean_axis", W(lambda a: a.mean(axis=(0, 2))), [t(3, 4, 2)]))
    out.append(GradCase("reshape_transpose", W(lambda a: a.reshape(4, 6).transpose()), [t(2, 3, 4)]))
    out.append(GradCase("getitem", W(lambda a: ad.getitem(a, (slice(1, 3), [0, 2, 2]))), [t(4, 3)]))
    out.append(GradCase("concat", W(lambda a, b: ad.concat([a, b], axis=1)), [t(2, 3), t(2, 2)]))

    # activations (inputs kept away from the leaky-relu kink)
    kinkless = rng.normal(size=(4, 5))
    kinkless[np.abs(kinkless) < 0.05] = 0.5
    out.append(GradCase("leaky_relu", W(ad.leaky_relu), [Tensor(kinkless)]))
    out.append(GradCase("sigmoid", W(ad.sigmoid), [t(4, 5, scale=3.0)]))
    out.append(GradCase("tanh", W(ad.tanh), [t(4, 5)]))

    # layers
    dense = Dense(4, 3, rng, dtype=np.float64)
    out.append(GradCase("dense", W(lambda x, w, b: ad.matmul(x, w.transpose()) + b),
                        [t(5, 4), dense.weight, dense.bias]))
    conv = Conv2D(2, 3, rng, dtype=np.float64)
    out.append(GradCase("conv2d", W(conv2d), [t(2, 2, 7, 7), conv.kernels, t(3)]))
    dec = Deconv3D(2, 2, rng, dtype=np.float64)
    out.append(GradCase("deconv3d", W(deconv3d), [t(2, 2, 2, 2, 2), dec.kernels, t(2)]))
    out.append(GradCase("center_crop", W(lambda x: center_crop(x, 3)), [t(1, 1, 5, 5, 5)]))
    bn = BatchNorm(3, dtype=np.float64)

    def batchnorm(x, gamma, beta):
        bn.gamma, bn.beta = gamma, beta
        bn.train()
        return bn(x)
    out.append(GradCase("batchnorm_train", W(batchnorm), [t(4, 3, 2, 2), t(3), t(3)]))

    def batchnorm_eval(x, gamma, beta):
        bn.gamma, bn.beta = gamma, beta
        bn.eval()
        return bn(x)
    out.append(GradCase("batchnorm_eval", W(batchnorm_eval), [t(4, 3), t(3), t(3)]))

    # renderer
    vox = lambda: Tensor(rng.uniform(0.0, 1.0, (2, 6, 6, 6)))
    out.append(GradCase("project", W(project), [vox()]))
    out.append(GradCase("rotate_nearest", W(lambda v: rotate_voxels(v, np.array([0.4, -2.0]), 0.3, "nearest")),
                        [vox()]))
    out.append(GradCase("rotate_trilinear",
                        W(lambda v, th, ph: rotate_voxels(v, th, ph, "trilinear")),
                        [vox(), Tensor(np.array([0.37, -1.91])), Tensor(np.array([0.23, 0.61]))]))
    out.append(GradCase("render_trilinear",
                        W(lambda v, th: project(rotate_voxels(v, th, 0.0, "trilinear"))),
                        [vox(), Tensor(np.array([2.71, -0.52]))]))

    # losses
    out.append(GradCase("bce_with_logits", lambda x: ad.bce_with_logits(x, 1.0) + ad.bce_with_logits(x, 0.0),
                        [t(6, 1, scale=4.0)]))
    out.append(GradCase("kl_standard_normal", lambda m, s: kl_standard_normal(GaussianLatent(m, s)),
                        [t(4, 2), t(4, 2, scale=0.5)]))
    out.append(GradCase("batch_mean_penalty", batch_mean_penalty, [t(5, 2)]))
    target = rng.uniform(0, 1, (3, 4, 4))
    out.append(GradCase("mse", lambda a: mse(a, Tensor(target)), [t(3, 4, 4)]))
    out.append(GradCase("recon_two_term", lambda a, b: recon_two_term(target, a, b), [t(3, 4, 4), t(3, 4, 4)]))
    out.append(GradCase("beta_vae_loss", lambda r, k: beta_vae_loss(r.sum(), k.sum(), 30.0), [t(2), t(2)]))
    out.append(GradCase("aae_losses", lambda r, f: sum(aae_losses(r, f), Tensor(0.0)), [t(4, 1), t(4, 1)]))
    return out


def run(seed: int = 0, h: float = 1e-5) -> list[GradReport]:
    reports = []
    with precision("float64"):
        for case in cases(seed):
            t0 = time.perf_counter()
            err = grad_check(case.f, case.inputs, h)
            reports.append(GradReport(case.name, err, time.perf_counter() - t0))
    return reports
