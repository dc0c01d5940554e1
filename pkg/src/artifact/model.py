"""The probabilistic 3-D autoencoder: 2-D conv encoder, 3-D deconv decoder,
renderer, optional texturizer and, for adversarial training, latent
discriminators.

``Model3D.forward`` runs one batch through the whole pipeline and returns the
images, the losses of the configured objective and scalar diagnostics.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import azimuth as az
from .autodiff import Tensor, as_tensor, leaky_relu, precision, sigmoid, tanh
from .nn import BatchNorm, Conv2D, Deconv3D, Dense, Module, center_crop
from .objectives import (
    DEFAULT_BETA,
    OBJECTIVES,
    GaussianLatent,
    NoiseSource,
    aae_losses,
    batch_mean_penalty,
    discriminator_accuracy,
    kl_standard_normal,
    recon_two_term,
    reparameterize,
)
from .render import MODES, render


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    objective: str = "mu_vae"
    beta: float = DEFAULT_BETA
    lambda_reg: float = 1.0
    azimuth: str = az.FIXED
    azimuth_reg: bool = True
    azimuth_steps: int = 1
    texturizer: bool = False
    sampling: str | None = None  # None: trilinear for the latent azimuth, nearest otherwise
    dz: int = 2
    dtheta: int = 1
    width: int = 256
    resolution: int = 28
    seed: int = 0
    lr: float = 1e-4
    lr_azimuth: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    clip: float | None = None
    dtype: str = "float32"
    disc_hidden: tuple = (128, 64)
    azimuth_hidden: int = 16

    def __post_init__(self):
        self.objective = self.objective.replace("-", "_")
        self.azimuth = az.parse_mode(self.azimuth)
        self.disc_hidden = tuple(self.disc_hidden)
        self.validate()

    @property
    def sampling_mode(self) -> str:
        if self.sampling is not None:
            return self.sampling
        return "trilinear" if self.azimuth == az.LATENT else "nearest"

    @property
    def reg_weight(self) -> float:
        if self.objective == "beta_vae":
            return self.beta
        if self.objective == "mu_vae":
            return self.lambda_reg
        return 1.0

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}; choose from {OBJECTIVES}")
        if self.objective == "aae" and self.azimuth == az.LATENT:
            raise ConfigError("the adversarial objective cannot train the latent azimuth: its pose "
                              "code has no encoder output for a discriminator to judge; use "
                              "--azimuth encoder-uniform, uniform or fixed")
        if self.azimuth == az.ENCODER_UNIFORM and self.objective != "aae":
            raise ConfigError("--azimuth encoder-uniform is regularized by a discriminator and "
                              "needs --objective aae")
        if self.objective == "beta_vae" and self.beta < 1:
            raise ConfigError(f"beta must be >= 1, got {self.beta}")
        if self.sampling is not None and self.sampling not in MODES:
            raise ConfigError(f"unknown sampling mode {self.sampling!r}")
        if self.dz < 1 or self.dtheta < 1 or self.width < 1 or self.resolution < 2:
            raise ConfigError("dz, dtheta, width must be >= 1 and resolution >= 2")
        if self.azimuth_steps < 1:
            raise ConfigError("azimuth_steps must be >= 1")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def encoder_channels(cfg: ModelConfig) -> list[int]:
    n, size = 0, cfg.resolution
    while size > 1:
        size = -(-size // 2)
        n += 1
    w = cfg.width
    ladder = [max(1, w // 8), max(1, w // 4), max(1, w // 2)] + [w] * max(0, n - 3)
    return ladder[:n]


def decoder_layout(cfg: ModelConfig) -> tuple[int, list[int]]:
    """Base cube size and channel list; three doublings then a center crop."""
    base = -(-cfg.resolution // 8)
    w = cfg.width
    return base, [w, max(1, w // 2), max(1, w // 4), 1]


class Encoder(Module):
    """Stride-2 conv stack down to 1x1, then linear heads for (mu, log sigma)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        chans = [1] + encoder_channels(cfg)
        self.convs = [Conv2D(a, b, rng) for a, b in zip(chans, chans[1:])]
        self.norms = [BatchNorm(c) for c in chans[1:]]
        self.mu = Dense(chans[-1], cfg.dz, rng)
        self.log_sigma = Dense(chans[-1], cfg.dz, rng)
        self.theta = Dense(chans[-1], 1, rng) if cfg.azimuth == az.ENCODER_UNIFORM else None

    def forward(self, x: Tensor) -> tuple[GaussianLatent, Tensor | None]:
        h = x
        for conv, bn in zip(self.convs, self.norms):
            h = leaky_relu(bn(conv(h)))
        h = h.reshape(h.shape[0], -1)
        t = tanh(self.theta(h)) if self.theta is not None else None
        return GaussianLatent(self.mu(h), self.log_sigma(h)), t


class Decoder(Module):
    """Dense to a coarse feature cube, three stride-2 deconvs, crop, sigmoid."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.base, chans = decoder_layout(cfg)
        self.resolution = cfg.resolution
        self.fc = Dense(cfg.dz, chans[0] * self.base ** 3, rng)
        self.fc_norm = BatchNorm(chans[0])
        self.deconvs = [Deconv3D(a, b, rng) for a, b in zip(chans, chans[1:])]
        self.norms = [BatchNorm(c) for c in chans[1:-1]]
        self.channels = chans

    def forward(self, z: Tensor) -> Tensor:
        B, b = z.shape[0], self.base
        h = self.fc(z).reshape(B, self.channels[0], b, b, b)
        h = leaky_relu(self.fc_norm(h))
        for i, deconv in enumerate(self.deconvs):
            h = deconv(h)
            if i < len(self.norms):
                h = leaky_relu(self.norms[i](h))
        h = center_crop(h, self.resolution)
        n = self.resolution
        return sigmoid(h.reshape(B, n, n, n))


class Texturizer(Module):
    """Two dense layers refining the projected image (leaky ReLU, then sigmoid)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        n = cfg.resolution ** 2
        self.hidden = Dense(n, n, rng)
        self.out = Dense(n, n, rng)

    def forward(self, img: Tensor) -> Tensor:
        B, n = img.shape[0], img.shape[-1]
        h = leaky_relu(self.hidden(img.reshape(B, n * n)))
        return sigmoid(self.out(h)).reshape(B, n, n)


class Discriminator(Module):
    """MLP producing one logit per code. ``frozen=True`` reads detached weights,
    so gradients reach the input but never this module's parameters."""

    def __init__(self, n_in: int, hidden: tuple, rng: np.random.Generator):
        sizes = [n_in, *hidden, 1]
        self.layers = [Dense(a, b, rng) for a, b in zip(sizes, sizes[1:])]

    def forward(self, x: Tensor, frozen: bool = False) -> Tensor:
        h = x
        for i, layer in enumerate(self.layers):
            w, b = layer.weight, layer.bias
            if frozen:
                w, b = w.detach(), b.detach()
            h = h @ w.T + b
            if i < len(self.layers) - 1:
                h = leaky_relu(h)
        return h.reshape(-1)


@dataclass
class ForwardResult:
    x_proj: Tensor
    x_tex: Tensor | None
    losses: dict
    diagnostics: dict
    voxels: Tensor
    z: Tensor
    theta: Tensor
    extras: dict = field(default_factory=dict)


class Model3D(Module):
    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        with precision(cfg.dtype):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
            self.encoder = Encoder(cfg, rng)
            self.decoder = Decoder(cfg, rng)
            self.texturizer = Texturizer(cfg, rng) if cfg.texturizer else None
            self.azimuth_post = (az.AzimuthPosterior(rng, cfg.dtheta, cfg.azimuth_hidden)
                                 if cfg.azimuth == az.LATENT else None)
            self.disc_z = Discriminator(cfg.dz, cfg.disc_hidden, rng) if cfg.objective == "aae" else None
            self.disc_theta = (Discriminator(1, cfg.disc_hidden, rng)
                               if cfg.azimuth == az.ENCODER_UNIFORM else None)
        self.name_parameters()

    # -- parameter groups ------------------------------------------------------------
    def main_parameters(self):
        mods = [self.encoder, self.decoder, self.texturizer]
        return [p for m in mods if m is not None for p in m.parameters()]

    def azimuth_parameters(self):
        return self.azimuth_post.parameters() if self.azimuth_post is not None else []

    def disc_parameters(self):
        mods = [self.disc_z, self.disc_theta]
        return [p for m in mods if m is not None for p in m.parameters()]

    # -- pieces -----------------------------------------------------------------------
    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def prepare_images(self, x) -> Tensor:
        data = np.asarray(getattr(x, "data", x), dtype=self.dtype)
        n = self.config.resolution
        if data.ndim == 3:
            data = data[:, None]
        if data.shape[1:] != (1, n, n):
            raise ValueError(f"expected images of shape [B, {n}, {n}], got {data.shape}")
        if data.min() < 0 or data.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        return Tensor(data)

    def encode(self, x) -> tuple[GaussianLatent, Tensor | None]:
        return self.encoder(self.prepare_images(x))

    def decode(self, z) -> Tensor:
        return self.decoder(as_tensor(z, dtype=self.dtype))

    def texturize(self, img: Tensor) -> Tensor | None:
        return self.texturizer(img) if self.texturizer is not None else None

    # -- pipeline ---------------------------------------------------------------------
    def forward(self, x, noise: NoiseSource) -> ForwardResult:
        cfg = self.config
        images = self.prepare_images(x)
        target = images.data[:, 0]
        B = target.shape[0]
        lat, t_enc = self.encoder(images)
        z = reparameterize(lat, noise)
        voxels = self.decoder(z)
        theta, z_theta = az.sample_azimuth(cfg.azimuth, self.azimuth_post, noise, B,
                                           encoder_theta=t_enc, dtype=self.dtype)
        x_proj = render(voxels, theta, 0.0, cfg.sampling_mode)
        x_tex = self.texturize(x_proj)
        recon = recon_two_term(target, x_proj, x_tex)

        losses = {"recon": recon}
        extras = {}
        disc_acc = float("nan")
        latent_pose = cfg.azimuth == az.LATENT and cfg.azimuth_reg
        if cfg.objective in ("vae", "beta_vae"):
            reg = kl_standard_normal(lat)
            if latent_pose:
                reg = reg + az.azimuth_kl(self.azimuth_post)
            reg = cfg.reg_weight * reg
        elif cfg.objective == "mu_vae":
            reg = batch_mean_penalty(z)
            if latent_pose:
                reg = reg + batch_mean_penalty(z_theta)
            reg = cfg.reg_weight * reg
        else:
            prior = Tensor(noise.normal(z.shape, dtype=self.dtype))
            d_real = self.disc_z(prior)
            d_fake = self.disc_z(z.detach())
            disc_loss, _ = aae_losses(d_real, d_fake)
            _, reg = aae_losses(d_real, self.disc_z(z, frozen=True))
            disc_acc = discriminator_accuracy(d_real, d_fake)
            if self.disc_theta is not None:
                prior_t = Tensor(noise.uniform(-1.0, 1.0, (B, 1), dtype=self.dtype))
                dt_real = self.disc_theta(prior_t)
                dt_fake = self.disc_theta(z_theta.detach())
                disc_t, _ = aae_losses(dt_real, dt_fake)
                _, gen_t = aae_losses(dt_real, self.disc_theta(z_theta, frozen=True))
                disc_loss = disc_loss + disc_t
                reg = reg + gen_t
                extras["disc_theta_acc"] = discriminator_accuracy(dt_real, dt_fake)
            losses["disc"] = disc_loss
        losses["reg"] = reg
        losses["total"] = recon + reg

        th = theta.data.astype(np.float64)
        diagnostics = {
            "recon": recon.item(),
            "reg": reg.item(),
            "total": losses["total"].item(),
            "theta_mu": float(th.mean()),
            "theta_sigma": float(th.std()),
            "disc_acc": disc_acc,
            "z_mean_norm": float(np.linalg.norm(z.data.astype(np.float64).mean(axis=0))),
        }
        return ForwardResult(x_proj, x_tex, losses, diagnostics, voxels, z, theta, extras)

    # -- inference helpers (eval mode, no noise) ---------------------------------------
    def posterior_theta(self, t_enc: Tensor | None, batch: int) -> np.ndarray:
        """Deterministic azimuth for inspection renders."""
        if self.config.azimuth == az.LATENT:
            return np.full(batch, float(self.azimuth_post.mean_azimuth().data[0]))
        if self.config.azimuth == az.ENCODER_UNIFORM and t_enc is not None:
            return math.pi * t_enc.data.reshape(-1).astype(np.float64)
        return np.zeros(batch)

    def reconstruct(self, x, theta=None) -> dict:
        """Decode the posterior mean and render it; returns numpy arrays."""
        was = self.training
        self.eval()
        try:
            lat, t_enc = self.encode(x)
            voxels = self.decoder(lat.mu.detach())
            B = voxels.shape[0]
            if theta is None:
                theta = self.posterior_theta(t_enc, B)
            proj = render(voxels, np.broadcast_to(theta, (B,)), 0.0, self.config.sampling_mode)
            tex = self.texturize(proj)
            return {"voxels": voxels.data, "projection": proj.data,
                    "texture": None if tex is None else tex.data, "theta": np.asarray(theta),
                    "mu": lat.mu.data, "log_sigma": lat.log_sigma.data}
        finally:
            self.train(was)

    def sample_prior(self, n: int, noise: NoiseSource) -> dict:
        """Shapes decoded from ``z ~ N(0, I)`` with azimuths from the pose model."""
        was = self.training
        self.eval()
        try:
            z = noise.normal((n, self.config.dz), dtype=self.dtype)
            voxels = self.decoder(Tensor(z))
            if self.config.azimuth == az.LATENT:
                z_theta = Tensor(noise.normal((n, self.config.dtheta), dtype=self.dtype))
                theta = self.azimuth_post.head(z_theta).data.astype(np.float64)
            else:
                theta = np.zeros(n)
            return {"z": z, "voxels": voxels.data, "theta": theta}
        finally:
            self.train(was)

    def decode_eval(self, z) -> np.ndarray:
        was = self.training
        self.eval()
        try:
            return self.decode(np.atleast_2d(np.asarray(z, dtype=self.dtype))).data
        finally:
            self.train(was)
