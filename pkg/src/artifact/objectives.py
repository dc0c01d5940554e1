"""Gaussian latents, reparameterized sampling and the training objectives.

Four regularizers are supported: the KL term of a VAE (``vae``), the same term
scaled by ``beta`` (``beta_vae``), a penalty on the batch mean of the latent
samples (``mu_vae``) and an adversarial discriminator on the latent codes
(``aae``). Reconstruction is a per-pixel mean squared error, with a second
term for the texturizer output when one is present.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, bce_with_logits, exp, make_result, reduce

OBJECTIVES = ("vae", "beta_vae", "mu_vae", "aae")
DEFAULT_BETA = 30.0


class NoiseSource:
    """Seeded stream of normal and uniform draws (single consumer)."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self.rng.standard_normal(shape).astype(dtype)

    def uniform(self, low: float, high: float, shape, dtype=np.float32) -> np.ndarray:
        return self.rng.uniform(low, high, shape).astype(dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self.rng.permutation(n)

    def child(self, key: int) -> "NoiseSource":
        """Independent stream derived from this seed and ``key``."""
        seq = np.random.SeedSequence([self.seed, int(key)])
        return NoiseSource(int(seq.generate_state(1)[0]))


@dataclass
class GaussianLatent:
    """Diagonal Gaussian ``N(mu, exp(log_sigma)^2)`` per example."""

    mu: Tensor
    log_sigma: Tensor

    @property
    def sigma(self) -> Tensor:
        return exp(self.log_sigma)


def reparameterize(lat: GaussianLatent, noise: NoiseSource | None = None, eps=None) -> Tensor:
    """``mu + sigma * eps`` with ``eps ~ N(0, I)`` drawn from ``noise`` unless given."""
    if eps is None:
        eps = noise.normal(lat.mu.shape, dtype=lat.mu.dtype)
    eps = Tensor(np.asarray(eps, dtype=lat.mu.dtype))
    return lat.mu + lat.sigma * eps


def kl_standard_normal(lat: GaussianLatent) -> Tensor:
    """KL(q || N(0, I)), summed over latent dims and averaged over the batch."""
    per_dim = _kl_terms(as_tensor(lat.mu), as_tensor(lat.log_sigma))
    if per_dim.ndim == 1:
        return per_dim.sum()
    return per_dim.sum(axis=tuple(range(1, per_dim.ndim))).mean()


def _kl_terms(mu: Tensor, ls: Tensor) -> Tensor:
    # 0.5 * (mu^2 + sigma^2 - 1) - log sigma, with expm1 so terms near the prior stay >= 0
    if mu.shape != ls.shape:
        raise ShapeError(f"mu and log_sigma shapes differ: {mu.shape} vs {ls.shape}")
    e = np.expm1(2.0 * ls.data)
    data = np.maximum(0.5 * (mu.data * mu.data + (e - 2.0 * ls.data)), 0)

    def bw(g):
        return g * mu.data, g * e

    return make_result(data.astype(mu.dtype, copy=False), "kl_terms", (mu, ls), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"reconstruction shapes differ: {a.shape} vs {b.shape}")
    return (a - b).square().mean()


def recon_two_term(x, x_proj: Tensor, x_tex: Tensor | None = None) -> Tensor:
    """Mean squared error of the projection against ``x``, plus that of the
    texturizer output against the same ``x`` when given."""
    x = as_tensor(x, dtype=x_proj.dtype)
    loss = mse(x_proj, x)
    if x_tex is not None:
        loss = loss + mse(x_tex, x)
    return loss


def beta_vae_loss(recon: Tensor, kl: Tensor, beta: float = DEFAULT_BETA) -> Tensor:
    if beta < 1:
        raise ValueError(f"beta must be >= 1, got {beta}")
    return recon + beta * kl


def vae_loss(recon: Tensor, kl: Tensor) -> Tensor:
    return beta_vae_loss(recon, kl, 1.0)


def batch_mean_penalty(z: Tensor) -> Tensor:
    """Squared norm of the batch mean of latent samples."""
    if z.shape[0] < 2:
        raise ShapeError("the batch-mean penalty needs at least 2 samples")
    return reduce("mean", z, axes=0).square().sum()


def mu_vae_loss(recon: Tensor, z: Tensor, lambda_reg: float = 1.0) -> Tensor:
    return recon + lambda_reg * batch_mean_penalty(z)


def aae_losses(d_real_logits: Tensor, d_fake_logits: Tensor) -> tuple[Tensor, Tensor]:
    """Discriminator loss (real -> 1, fake -> 0) and non-saturating generator loss.

    Pass detached fake codes when building the discriminator loss and a
    frozen discriminator when building the generator loss; see
    :class:`artifact.model.Discriminator`.
    """
    disc = bce_with_logits(d_real_logits, 1.0) + bce_with_logits(d_fake_logits, 0.0)
    gen = bce_with_logits(d_fake_logits, 1.0)
    return disc, gen


def discriminator_accuracy(d_real_logits, d_fake_logits) -> float:
    real = np.asarray(getattr(d_real_logits, "data", d_real_logits)).reshape(-1)
    fake = np.asarray(getattr(d_fake_logits, "data", d_fake_logits)).reshape(-1)
    hits = np.count_nonzero(real > 0) + np.count_nonzero(fake <= 0)
    return hits / (real.size + fake.size)
