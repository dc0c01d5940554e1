"""Azimuth treatments: fixed at zero, uniform noise, a global latent variable
with a tanh head, or a bounded encoder output regularized toward a uniform prior.
"""
from __future__ import annotations

import math

import numpy as np

from .autodiff import Parameter, Tensor, as_tensor, default_dtype, tanh
from .nn import Dense, Module
from .objectives import GaussianLatent, NoiseSource, kl_standard_normal, reparameterize

FIXED = "fixed_zero"
UNIFORM = "uniform_noise"
LATENT = "latent_variable"
ENCODER_UNIFORM = "encoder_output_uniform_prior"
AZIMUTH_MODES = (FIXED, UNIFORM, LATENT, ENCODER_UNIFORM)

# command-line spellings
MODE_ALIASES = {"fixed": FIXED, "uniform": UNIFORM, "latent": LATENT, "encoder-uniform": ENCODER_UNIFORM}


def parse_mode(name: str) -> str:
    mode = MODE_ALIASES.get(name, name)
    if mode not in AZIMUTH_MODES:
        raise ValueError(f"unknown azimuth mode {name!r}")
    return mode


class AzimuthPosterior(Module):
    """Global (not input-dependent) Gaussian over the pose code plus a tanh head.

    The head maps a pose code to ``t`` in (-1, 1); the emitted azimuth is ``pi * t``.
    """

    def __init__(self, rng: np.random.Generator, dim: int = 1, hidden: int = 16, dtype=None):
        dtype = dtype or default_dtype()
        self.mu_theta = Parameter(np.zeros(dim, dtype=dtype), dtype=dtype)
        self.log_sigma_theta = Parameter(np.zeros(dim, dtype=dtype), dtype=dtype)
        self.hidden = Dense(dim, hidden, rng, dtype)
        self.out = Dense(hidden, 1, rng, dtype)
        self.dim = dim

    @property
    def latent(self) -> GaussianLatent:
        return GaussianLatent(self.mu_theta, self.log_sigma_theta)

    def head(self, z_theta: Tensor) -> Tensor:
        """Azimuth in radians for pose codes of shape ``[B, dim]``."""
        t = tanh(self.out(tanh(self.hidden(z_theta))))
        return math.pi * t.reshape(-1)

    def sample(self, noise: NoiseSource, batch: int) -> tuple[Tensor, Tensor]:
        """Per-example pose codes ``[B, dim]`` and the azimuths they produce."""
        eps = noise.normal((batch, self.dim), dtype=self.mu_theta.dtype)
        ones = Tensor(np.ones((batch, 1), dtype=self.mu_theta.dtype))
        lat = GaussianLatent(ones @ self.mu_theta.reshape(1, self.dim),
                             ones @ self.log_sigma_theta.reshape(1, self.dim))
        z_theta = reparameterize(lat, eps=eps)
        return z_theta, self.head(z_theta)

    def mean_azimuth(self) -> Tensor:
        return self.head(self.mu_theta.reshape(1, self.dim))


def sample_azimuth(mode: str, post: AzimuthPosterior | None, noise: NoiseSource, batch: int,
                   encoder_theta: Tensor | None = None, dtype=None) -> tuple[Tensor, Tensor | None]:
    """Azimuths ``[B]`` for one batch, and the pose codes when the mode has them.

    ``encoder_theta`` is the encoder's bounded output in (-1, 1), used by the
    encoder mode.
    """
    dtype = dtype or default_dtype()
    if mode == FIXED:
        return Tensor(np.zeros(batch, dtype=dtype)), None
    if mode == UNIFORM:
        return Tensor(noise.uniform(-math.pi, math.pi, batch, dtype=dtype)), None
    if mode == LATENT:
        if post is None:
            raise ValueError("latent azimuth mode needs an AzimuthPosterior")
        z_theta, theta = post.sample(noise, batch)
        return theta, z_theta
    if mode == ENCODER_UNIFORM:
        if encoder_theta is None:
            raise ValueError("encoder azimuth mode needs the encoder's azimuth output")
        t = as_tensor(encoder_theta)
        return math.pi * t.reshape(-1), t.reshape(-1, 1)
    raise ValueError(f"unknown azimuth mode {mode!r}")


def azimuth_kl(post: AzimuthPosterior) -> Tensor:
    """Closed-form KL of the pose posterior against a standard normal."""
    return kl_standard_normal(post.latent)
