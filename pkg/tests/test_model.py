import math

import numpy as np
import pytest

from artifact.autodiff import Tensor, grad_check, precision
from artifact.model import ConfigError, Model3D, ModelConfig, decoder_layout, encoder_channels
from artifact.objectives import (NoiseSource, batch_mean_penalty, kl_standard_normal, recon_two_term,
                                 reparameterize)
from artifact.render import render


def small(**kw):
    base = dict(width=8, seed=3)
    base.update(kw)
    return Model3D(ModelConfig(**base))


def images(rng, b=4, n=28):
    return rng.uniform(0.0, 1.0, (b, n, n)).astype(np.float32)


class TestConfig:
    def test_beta_vae_defaults_to_thirty(self):
        cfg = ModelConfig(objective="beta-vae")
        assert cfg.beta == 30.0 and cfg.reg_weight == 30.0

    def test_aliases_normalized(self):
        cfg = ModelConfig(objective="mu-vae", azimuth="uniform")
        assert cfg.objective == "mu_vae" and cfg.azimuth == "uniform_noise"

    def test_sampling_default_follows_azimuth(self):
        assert ModelConfig(azimuth="latent").sampling_mode == "trilinear"
        assert ModelConfig(azimuth="fixed").sampling_mode == "nearest"
        assert ModelConfig(azimuth="latent", sampling="nearest").sampling_mode == "nearest"

    @pytest.mark.parametrize("kw", [
        dict(objective="aae", azimuth="latent"),
        dict(objective="mu_vae", azimuth="encoder-uniform"),
        dict(objective="beta_vae", beta=0.5),
        dict(objective="gan"),
        dict(sampling="cubic"),
        dict(dz=0),
        dict(azimuth_steps=0),
    ])
    def test_invalid_combinations(self, kw):
        with pytest.raises(ConfigError):
            ModelConfig(**kw)

    def test_aae_with_latent_explains_itself(self):
        with pytest.raises(ConfigError, match="encoder-uniform"):
            ModelConfig(objective="aae", azimuth="latent")

    def test_json_round_trip(self):
        cfg = ModelConfig(objective="aae", azimuth="encoder-uniform", width=16, dz=5, texturizer=True)
        assert ModelConfig.from_json(cfg.to_json()) == cfg


class TestArchitecture:
    def test_encoder_reaches_one_by_one(self):
        cfg = ModelConfig(width=256)
        # 28 -> 14 -> 7 -> 4 -> 2 -> 1
        assert encoder_channels(cfg) == [32, 64, 128, 256, 256]

    def test_decoder_doubles_to_cover_resolution(self):
        base, chans = decoder_layout(ModelConfig(width=64))
        assert base == 4 and base * 8 >= 28 and chans == [64, 32, 16, 1]

    def test_forward_shapes(self, rng):
        m = small()
        res = m.forward(images(rng), NoiseSource(0))
        assert res.x_proj.shape == (4, 28, 28)
        assert res.voxels.shape == (4, 28, 28, 28)
        assert res.z.shape == (4, 2)
        assert res.x_tex is None
        assert ((res.voxels.data > 0) & (res.voxels.data < 1)).all()
        assert ((res.x_proj.data >= 0) & (res.x_proj.data < 1)).all()

    def test_texturizer_output(self, rng):
        res = small(texturizer=True).forward(images(rng), NoiseSource(0))
        assert res.x_tex.shape == (4, 28, 28)
        assert ((res.x_tex.data > 0) & (res.x_tex.data < 1)).all()

    def test_rejects_bad_images(self, rng):
        m = small()
        with pytest.raises(ValueError):
            m.forward(images(rng) * 2.0, NoiseSource(0))
        with pytest.raises(ValueError):
            m.forward(images(rng, n=14), NoiseSource(0))

    def test_same_seed_same_weights(self):
        a, b = small(), small()
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_parameter_groups_are_disjoint(self):
        m = small(objective="aae", azimuth="encoder-uniform")
        ids = [set(map(id, g)) for g in (m.main_parameters(), m.azimuth_parameters(), m.disc_parameters())]
        assert not (ids[0] & ids[2]) and not ids[1]
        assert len(ids[0]) + len(ids[2]) == len(m.parameters())


class TestLosses:
    """The model's losses equal the same pipeline composed by hand."""

    def hand(self, m, x, seed):
        noise = NoiseSource(seed)
        lat, t_enc = m.encode(x)
        z = reparameterize(lat, noise)
        vox = m.decode(z)
        return noise, lat, t_enc, z, vox

    def test_mu_vae_fixed(self, rng):
        m = small(lambda_reg=2.5)
        x = images(rng)
        res = m.forward(x, NoiseSource(5))
        _, lat, _, z, vox = self.hand(m, x, 5)
        recon = recon_two_term(x, render(vox, np.zeros(4), 0.0, "nearest"))
        expected = recon.item() + 2.5 * batch_mean_penalty(z).item()
        assert res.losses["total"].item() == pytest.approx(expected, rel=1e-6)

    def test_beta_vae_with_texturizer(self, rng):
        m = small(objective="beta_vae", texturizer=True)
        x = images(rng)
        res = m.forward(x, NoiseSource(5))
        _, lat, _, z, vox = self.hand(m, x, 5)
        proj = render(vox, np.zeros(4), 0.0, "nearest")
        recon = recon_two_term(x, proj, m.texturize(proj))
        assert res.losses["recon"].item() == pytest.approx(recon.item(), rel=1e-6)
        assert res.losses["reg"].item() == pytest.approx(30.0 * kl_standard_normal(lat).item(), rel=1e-6)

    def test_uniform_azimuths_in_range(self, rng):
        res = small(azimuth="uniform").forward(images(rng, b=64), NoiseSource(1))
        th = res.theta.data
        assert (th >= -math.pi).all() and (th <= math.pi).all() and th.std() > 1.0
        assert res.diagnostics["theta_sigma"] == pytest.approx(float(th.astype(np.float64).std()))

    def test_fixed_azimuth_diagnostics(self, rng):
        d = small().forward(images(rng), NoiseSource(1)).diagnostics
        assert d["theta_mu"] == 0.0 and d["theta_sigma"] == 0.0 and math.isnan(d["disc_acc"])


class TestGradients:
    def test_pipeline_gradient_check(self, rng):
        """Finite differences through encode, sample, decode, trilinear render and loss."""
        with precision("float64"):
            m = Model3D(ModelConfig(width=4, resolution=8, azimuth="latent", dtype="float64", seed=2))
            x = rng.uniform(0.0, 1.0, (3, 8, 8))
            params = dict(m.named_parameters())
            picked = [params[n] for n in params
                      if n.startswith(("encoder.mu", "decoder.fc.", "azimuth_post"))]
            assert len(picked) >= 3
            f = lambda *_: m.forward(x, NoiseSource(9)).losses["total"]
            assert grad_check(f, picked, 1e-6) < 1e-4

    def test_uniform_mode_has_no_pose_gradient(self, rng):
        m = small(azimuth="uniform")
        res = m.forward(images(rng), NoiseSource(0))
        res.losses["total"].backward()
        assert m.azimuth_parameters() == []
        assert not res.theta.requires_grad

    def test_latent_pose_receives_gradient(self, rng):
        m = small(azimuth="latent")
        m.forward(images(rng), NoiseSource(0)).losses["total"].backward()
        grads = [p.grad for p in m.azimuth_parameters()]
        assert grads and all(g is not None for g in grads)
        assert any(np.abs(g).max() > 0 for g in grads)

    def test_aae_gradients_are_separated(self, rng):
        m = small(objective="aae")
        res = m.forward(images(rng), NoiseSource(0))
        res.losses["disc"].backward()
        assert all(p.grad is None or not p.grad.any() for p in m.main_parameters())
        assert any(p.grad is not None and p.grad.any() for p in m.disc_parameters())

        m.zero_grad()
        res = m.forward(images(rng), NoiseSource(0))
        res.losses["total"].backward()
        assert all(p.grad is None or not p.grad.any() for p in m.disc_parameters())
        enc = [p for n, p in m.named_parameters() if n.startswith("encoder.")]
        assert any(p.grad is not None and p.grad.any() for p in enc)


class TestInference:
    def test_reconstruct_is_deterministic_and_keeps_mode(self, rng):
        m = small()
        x = images(rng, b=3)
        m.forward(x, NoiseSource(0))  # populate running statistics once
        a, b = m.reconstruct(x), m.reconstruct(x)
        np.testing.assert_array_equal(a["projection"], b["projection"])
        assert m.training
        assert a["voxels"].shape == (3, 28, 28, 28)

    def test_reconstruct_at_given_pose_matches_render(self, rng):
        m = small()
        x = images(rng, b=2)
        out = m.reconstruct(x, theta=math.pi / 2)
        again = render(Tensor(out["voxels"]), np.full(2, math.pi / 2), 0.0, "nearest").data
        np.testing.assert_array_equal(out["projection"], again)

    def test_sample_prior_replays(self):
        m = small()
        a, b = m.sample_prior(3, NoiseSource(4)), m.sample_prior(3, NoiseSource(4))
        np.testing.assert_array_equal(a["voxels"], b["voxels"])
        assert a["voxels"].shape == (3, 28, 28, 28)

    def test_decode_eval_single_code(self):
        assert small().decode_eval([0.1, -0.2]).shape == (1, 28, 28, 28)
