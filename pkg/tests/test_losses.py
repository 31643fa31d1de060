"""Loss terms: the sparsifying KL fit, the noisy cross-entropy, and samplers."""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from taskcomm.channel import transmit
from taskcomm.errors import ModelContractViolation
from taskcomm.losses import (
    DEFAULT_KL_CONSTANTS,
    GaussianPriorKl,
    KlConstants,
    VibLossTerms,
    kl_log_uniform,
    point_sigma2_sampler,
    uniform_sigma2_sampler,
    vib_loss,
    vl_vib_loss,
)

K1 = DEFAULT_KL_CONSTANTS.k1
K2 = DEFAULT_KL_CONSTANTS.k2
K3 = DEFAULT_KL_CONSTANTS.k3


class TestKlLogUniform:
    def test_exact_zero_hits_the_limit(self):
        value = kl_log_uniform(torch.zeros(5), 0.01)
        assert torch.equal(value, torch.full((5,), -K1))

    def test_value_at_alpha_one(self):
        # z = sigma makes alpha = 1: -(k1 * S(k2) - 0.5 ln 2), computed by hand
        sigma2 = 0.04
        z = torch.tensor([math.sqrt(sigma2)], dtype=torch.float64)
        expected = -(K1 / (1.0 + math.exp(-K2)) - 0.5 * math.log(2.0))
        assert expected == pytest.approx(-0.204521, abs=1e-6)
        value = kl_log_uniform(z, sigma2)
        assert float(value) == pytest.approx(expected, abs=1e-12)

    def test_even_in_z(self):
        z = torch.linspace(0.01, 2.0, 64, dtype=torch.float64)
        assert torch.allclose(kl_log_uniform(z, 0.01), kl_log_uniform(-z, 0.01))

    def test_monotone_increasing_in_magnitude(self):
        sigma2 = 0.01
        z = torch.logspace(-4, 1, 200, dtype=torch.float64)
        values = kl_log_uniform(z, sigma2)
        assert bool((values.diff() > 0).all())

    def test_minimum_at_zero_by_grid_search(self):
        z = torch.linspace(-3.0, 3.0, 6001, dtype=torch.float64)
        values = kl_log_uniform(z, 0.05)
        assert int(values.argmin()) == 3000  # the z = 0 grid point
        assert bool((values >= -K1).all())

    def test_zero_point_has_zero_gradient(self):
        z = torch.zeros(3, dtype=torch.float64, requires_grad=True)
        kl_log_uniform(z, 0.01).sum().backward()
        assert torch.equal(z.grad, torch.zeros(3, dtype=torch.float64))

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(0)
        h = 1e-7
        failures = 0
        for _ in range(100):
            z0 = float(rng.uniform(0.02, 2.0) * rng.choice([-1.0, 1.0]))
            sigma2 = float(rng.uniform(3e-3, 0.1))
            z = torch.tensor([z0], dtype=torch.float64, requires_grad=True)
            kl_log_uniform(z, sigma2).sum().backward()
            grad = float(z.grad)
            plus = float(kl_log_uniform(torch.tensor([z0 + h], dtype=torch.float64), sigma2))
            minus = float(kl_log_uniform(torch.tensor([z0 - h], dtype=torch.float64), sigma2))
            numeric = (plus - minus) / (2 * h)
            if abs(grad - numeric) / max(abs(numeric), 1e-12) >= 1e-4:
                failures += 1
        assert failures == 0

    def test_per_row_sigma2_broadcast(self):
        z = torch.tensor([[0.1, 0.2], [0.1, 0.2]], dtype=torch.float64)
        sigma2 = torch.tensor([0.01, 0.09], dtype=torch.float64)
        out = kl_log_uniform(z, sigma2)
        assert float(out[0, 0]) == pytest.approx(float(kl_log_uniform(torch.tensor([0.1], dtype=torch.float64), 0.01)))
        assert float(out[1, 1]) == pytest.approx(float(kl_log_uniform(torch.tensor([0.2], dtype=torch.float64), 0.09)))

    def test_rejects_nonpositive_sigma2(self):
        with pytest.raises(ValueError):
            kl_log_uniform(torch.ones(2), 0.0)

    def test_constants_are_the_published_fit(self):
        constants = KlConstants()
        assert (constants.k1, constants.k2, constants.k3) == (0.63576, 1.87320, 1.48695)


def _tiny_model(in_dim=8, feat_dim=4, classes=3, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    linear = torch.nn.Linear(in_dim, feat_dim).to(dtype)
    decoder = torch.nn.Sequential(
        torch.nn.Linear(feat_dim, 16), torch.nn.ReLU(), torch.nn.Linear(16, classes)
    ).to(dtype)
    encoder = lambda x: torch.tanh(linear(x))
    return linear, encoder, decoder


def _tiny_batch(n=16, in_dim=8, classes=3, seed=1, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, in_dim, generator=g, dtype=dtype)
    y = torch.randint(0, classes, (n,), generator=g)
    return x, y


class TestVibLoss:
    def test_total_is_the_weighted_sum(self):
        terms = VibLossTerms(torch.tensor(2.0), torch.tensor(3.0), beta=0.5)
        assert float(terms.total) == pytest.approx(2.0 + 0.5 * 3.0, rel=1e-12)

    def test_beta_zero_reduces_to_cross_entropy(self):
        _, encoder, decoder = _tiny_model()
        batch = _tiny_batch()
        rng = torch.Generator().manual_seed(3)
        terms = vib_loss(batch, encoder, decoder, sigma2=0.01, beta=0.0, rng=rng)
        assert torch.equal(terms.total, terms.cross_entropy)

    def test_all_zero_features_give_the_kl_floor(self):
        n_dims = 6
        encoder = lambda x: torch.zeros(x.shape[0], n_dims, dtype=x.dtype)
        decoder = torch.nn.Linear(n_dims, 3).double()
        batch = _tiny_batch()
        rng = torch.Generator().manual_seed(4)
        terms = vib_loss(batch, encoder, decoder, sigma2=0.01, beta=1.0, rng=rng)
        assert float(terms.kl_total.detach()) == pytest.approx(n_dims * (-K1), rel=1e-12)

    def test_cross_entropy_matches_monte_carlo_integration(self):
        # one example, many channel draws, against an independent estimate
        _, encoder, decoder = _tiny_model(seed=5)
        x, y = _tiny_batch(n=1, seed=6)
        sigma2 = 0.05
        draws = 10_000
        rng = torch.Generator().manual_seed(7)
        terms = vib_loss((x, y), encoder, decoder, sigma2, beta=0.0, noise_samples=draws, rng=rng)

        np_rng = np.random.default_rng(8)
        with torch.no_grad():
            z = encoder(x).numpy()
            noise = np_rng.normal(0.0, math.sqrt(sigma2), size=(draws, z.shape[1]))
            received = torch.tensor(z + noise)
            log_probs = F.log_softmax(decoder(received), dim=1)
            ces = -log_probs[:, int(y)].numpy()
        se_diff = math.sqrt(2.0) * ces.std(ddof=1) / math.sqrt(draws)
        assert float(terms.cross_entropy.detach()) == pytest.approx(ces.mean(), abs=3 * se_diff)

    def test_kl_term_is_permutation_invariant(self):
        _, encoder, decoder = _tiny_model()
        x, y = _tiny_batch(n=32)
        perm = torch.randperm(32, generator=torch.Generator().manual_seed(9))
        a = vib_loss((x, y), encoder, decoder, 0.01, beta=1.0, rng=torch.Generator().manual_seed(0))
        b = vib_loss((x[perm], y[perm]), encoder, decoder, 0.01, beta=1.0, rng=torch.Generator().manual_seed(0))
        assert float(a.kl_total.detach()) == pytest.approx(float(b.kl_total.detach()), rel=1e-12)

    def test_full_loss_permutation_invariant_in_the_noiseless_limit(self):
        _, encoder, decoder = _tiny_model()
        x, y = _tiny_batch(n=32)
        perm = torch.randperm(32, generator=torch.Generator().manual_seed(10))
        a = vib_loss((x, y), encoder, decoder, 1e-18, beta=0.7, rng=torch.Generator().manual_seed(0))
        b = vib_loss((x[perm], y[perm]), encoder, decoder, 1e-18, beta=0.7, rng=torch.Generator().manual_seed(0))
        assert float(a.total.detach()) == pytest.approx(float(b.total.detach()), rel=1e-9)

    def test_gradients_match_finite_differences(self):
        # 2-dim input, 3-dim feature; the noise is pinned by reseeding per call
        torch.manual_seed(11)
        linear = torch.nn.Linear(2, 3).double()
        decoder = torch.nn.Linear(3, 4).double()
        encoder = lambda t: torch.tanh(linear(t))
        g = torch.Generator().manual_seed(12)
        x = torch.rand(8, 2, generator=g, dtype=torch.float64)
        y = torch.randint(0, 4, (8,), generator=g)

        def loss_value():
            rng = torch.Generator().manual_seed(13)
            return vib_loss((x, y), encoder, decoder, 0.02, beta=0.3, rng=rng).total

        loss = loss_value()
        params = list(linear.parameters()) + list(decoder.parameters())
        grads = torch.autograd.grad(loss, params)
        h = 1e-6
        for param, grad in zip(params, grads):
            flat = param.data.view(-1)
            for index in range(flat.numel()):
                original = float(flat[index])
                flat[index] = original + h
                plus = float(loss_value().detach())
                flat[index] = original - h
                minus = float(loss_value().detach())
                flat[index] = original
                numeric = (plus - minus) / (2 * h)
                analytic = float(grad.view(-1)[index])
                assert analytic == pytest.approx(numeric, rel=1e-3, abs=1e-8)

    def test_masked_dimensions_receive_no_noise(self):
        n_dims = 4
        mask = torch.tensor([1.0, 1.0, 0.0, 0.0], dtype=torch.float64)
        captured = {}

        def decoder(received):
            captured["received"] = received.detach().clone()
            return torch.zeros(received.shape[0], 3, dtype=received.dtype)

        encoder = lambda x: (torch.zeros(x.shape[0], n_dims, dtype=x.dtype), mask)
        batch = _tiny_batch(n=8)
        vib_loss(batch, encoder, decoder, sigma2=0.5, beta=0.0, rng=torch.Generator().manual_seed(1))
        assert torch.equal(captured["received"][:, 2:], torch.zeros(8, 2, dtype=torch.float64))
        assert bool((captured["received"][:, :2] != 0).any())

    def test_decoder_contract_violation(self):
        encoder = lambda x: torch.zeros(x.shape[0], 3, dtype=x.dtype)
        decoder = lambda received: received * float("nan")
        with pytest.raises(ModelContractViolation):
            vib_loss(_tiny_batch(), encoder, decoder, 0.01, beta=0.0, rng=torch.Generator().manual_seed(0))

    def test_rejects_empty_batch_and_bad_sample_count(self):
        _, encoder, decoder = _tiny_model()
        x, y = _tiny_batch(n=4)
        with pytest.raises(ValueError):
            vib_loss((x[:0], y[:0]), encoder, decoder, 0.01, beta=0.0)
        with pytest.raises(ValueError):
            vib_loss((x, y), encoder, decoder, 0.01, beta=0.0, noise_samples=0)


class TestVlVibLoss:
    @staticmethod
    def _dynamic_encoder(linear):
        return lambda x, sigma2_vec: torch.tanh(linear(x))

    def test_matches_manual_recomputation_with_shared_stream(self):
        linear, _, decoder = _tiny_model(seed=20)
        encoder = self._dynamic_encoder(linear)
        x, y = _tiny_batch(n=16, seed=21)
        sampler = uniform_sigma2_sampler(3e-3, 0.1)

        terms = vl_vib_loss((x, y), encoder, decoder, sampler, beta=0.4, rng=torch.Generator().manual_seed(22))

        rng = torch.Generator().manual_seed(22)
        sigma2_vec = sampler(16, rng).to(torch.float64)
        z = torch.tanh(linear(x))
        received = transmit(z, sigma2_vec.unsqueeze(1), rng)
        expected_ce = F.cross_entropy(decoder(received), y)
        expected_kl = kl_log_uniform(z, sigma2_vec.unsqueeze(1)).sum(dim=1).mean()
        assert float(terms.cross_entropy.detach()) == pytest.approx(float(expected_ce.detach()), rel=1e-12)
        assert float(terms.kl_total.detach()) == pytest.approx(float(expected_kl.detach()), rel=1e-12)

    def test_deterministic_given_seed(self):
        linear, _, decoder = _tiny_model(seed=23)
        encoder = self._dynamic_encoder(linear)
        batch = _tiny_batch(n=8, seed=24)
        sampler = uniform_sigma2_sampler(3e-3, 0.1)
        a = vl_vib_loss(batch, encoder, decoder, sampler, beta=0.4, rng=torch.Generator().manual_seed(25))
        b = vl_vib_loss(batch, encoder, decoder, sampler, beta=0.4, rng=torch.Generator().manual_seed(25))
        assert torch.equal(a.total, b.total)

    def test_point_mass_sampler_matches_fixed_variance_loss(self):
        linear, encoder_static, decoder = _tiny_model(seed=26)
        encoder_dynamic = self._dynamic_encoder(linear)
        x, y = _tiny_batch(n=32, seed=27)
        sigma2 = 0.02
        sampler = point_sigma2_sampler(sigma2)

        fixed = vl_vib_loss((x, y), encoder_dynamic, decoder, sampler, beta=0.4, rng=torch.Generator().manual_seed(0))
        static = vib_loss((x, y), encoder_static, decoder, sigma2, beta=0.4, rng=torch.Generator().manual_seed(0))
        # the KL term has no channel randomness: it must agree exactly
        assert float(fixed.kl_total.detach()) == pytest.approx(float(static.kl_total.detach()), rel=1e-12)

        # the cross-entropies agree in distribution: compare means over draws
        vl_draws = np.array([
            float(vl_vib_loss((x, y), encoder_dynamic, decoder, sampler, beta=0.0,
                              rng=torch.Generator().manual_seed(1000 + i)).cross_entropy.detach())
            for i in range(200)
        ])
        static_draws = np.array([
            float(vib_loss((x, y), encoder_static, decoder, sigma2, beta=0.0,
                           rng=torch.Generator().manual_seed(5000 + i)).cross_entropy.detach())
            for i in range(200)
        ])
        se = math.sqrt(vl_draws.var(ddof=1) / 200 + static_draws.var(ddof=1) / 200)
        assert vl_draws.mean() == pytest.approx(static_draws.mean(), abs=4 * se)

    def test_beta_zero_total_is_cross_entropy(self):
        linear, _, decoder = _tiny_model(seed=28)
        encoder = self._dynamic_encoder(linear)
        batch = _tiny_batch(n=8, seed=29)
        sampler = uniform_sigma2_sampler(3e-3, 0.1)
        terms = vl_vib_loss(batch, encoder, decoder, sampler, beta=0.0, rng=torch.Generator().manual_seed(30))
        assert torch.equal(terms.total, terms.cross_entropy)


class TestSamplers:
    def test_uniform_sampler_range_and_determinism(self):
        sampler = uniform_sigma2_sampler(3e-3, 0.1)
        a = sampler(1000, torch.Generator().manual_seed(1))
        b = sampler(1000, torch.Generator().manual_seed(1))
        assert torch.equal(a, b)
        assert float(a.min()) >= 3e-3 and float(a.max()) <= 0.1

    def test_rejects_bad_ranges(self):
        with pytest.raises(ValueError):
            uniform_sigma2_sampler(0.0, 0.1)
        with pytest.raises(ValueError):
            uniform_sigma2_sampler(0.2, 0.1)
        with pytest.raises(ValueError):
            point_sigma2_sampler(-1.0)


class TestGaussianPriorKl:
    @staticmethod
    def numeric_kl(z, sigma2, mu, prior_var):
        sigma = math.sqrt(sigma2)
        s = math.sqrt(prior_var)
        lo = min(z - 12 * sigma, mu - 12 * s)
        hi = max(z + 12 * sigma, mu + 12 * s)
        x = np.linspace(lo, hi, 400_001)
        p = np.exp(-0.5 * ((x - z) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))
        q = np.exp(-0.5 * ((x - mu) / s) ** 2) / (s * math.sqrt(2 * math.pi))
        integrand = np.where(p > 0, p * (np.log(np.maximum(p, 1e-300)) - np.log(np.maximum(q, 1e-300))), 0.0)
        return float(np.trapezoid(integrand, x))

    def test_closed_form_matches_quadrature(self):
        rng = np.random.default_rng(3)
        module = GaussianPriorKl(1).double()
        for _ in range(10):
            z = float(rng.uniform(-1.0, 1.0))
            sigma2 = float(rng.uniform(3e-3, 0.1))
            mu = float(rng.uniform(-0.5, 0.5))
            prior_var = float(rng.uniform(0.1, 2.0))
            with torch.no_grad():
                module.mean[0] = mu
                module.log_var[0] = math.log(prior_var)
            with torch.no_grad():
                value = float(module(torch.tensor([[z]], dtype=torch.float64), sigma2))
            assert value == pytest.approx(self.numeric_kl(z, sigma2, mu, prior_var), abs=1e-6)

    def test_zero_when_prior_equals_the_conditional(self):
        module = GaussianPriorKl(1).double()
        sigma2 = 0.05
        with torch.no_grad():
            module.mean[0] = 0.3
            module.log_var[0] = math.log(sigma2)
        with torch.no_grad():
            value = float(module(torch.tensor([[0.3]], dtype=torch.float64), sigma2))
        assert value == pytest.approx(0.0, abs=1e-12)
