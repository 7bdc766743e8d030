"""Random streams, exact OU sampling and multiplicative noise channels."""

import numpy as np
import pytest
from scipy import stats

from vortex_ldp.noise import (
    SIGMA_FAMILIES,
    AdditiveNoiseSpec,
    Channel,
    HypothesisViolation,
    MultiplicativeNoiseSpec,
    RngStream,
    eval_sigma,
    ou_step_coeffs,
    sample_stochastic_convolution_step,
    sigma_derivative_samples,
    wiener_increments,
)
from vortex_ldp.torus import RealField, SpectralField, TorusGrid, lp_norm_samples, mirror, zeros

MODES = [(1, 0), (1, 1), (2, 1)]  # |eta|^2 = 1, 2, 5


def at_mode(z, index):
    return z[(slice(None),) + tuple(index)]


def ou_variance(a, lam, t):
    return lam ** (-a) * (1 - np.exp(-2 * lam * t)) / (2 * lam)


def run_ou(grid, spec, t, dt, samples, stream, zeta0=None):
    z = np.zeros((samples, grid.n, grid.n), complex) if zeta0 is None else np.broadcast_to(zeta0, (samples,) + zeta0.shape).copy()
    gen = stream.generator
    for _ in range(int(round(t / dt))):
        z = ou_step_coeffs(grid, z, dt, spec, gen)
    return z


class TestRngStream:
    def test_same_key_same_draws(self):
        a = RngStream(42, 3, "wiener").generator.standard_normal(10)
        b = RngStream(42, 3, "wiener").generator.standard_normal(10)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("other", [RngStream(42, 4, "wiener"), RngStream(42, 3, "init"), RngStream(43, 3, "wiener")])
    def test_distinct_keys(self, other):
        a = RngStream(42, 3, "wiener").generator.standard_normal(10)
        assert not np.array_equal(a, other.generator.standard_normal(10))

    def test_child(self):
        c = RngStream(7, 0, "mc").child(5)
        assert (c.seed, c.index, c.purpose) == (7, 5, "mc")

    @pytest.mark.parametrize("seed", [-1, 2**64])
    def test_seed_range(self, seed):
        with pytest.raises(ValueError, match="64-bit"):
            RngStream(seed)

    def test_max_seed_accepted(self):
        RngStream(2**64 - 1).generator.standard_normal()


class TestAdditiveSpec:
    def test_requires_positive_a(self):
        with pytest.raises(ValueError):
            AdditiveNoiseSpec(0.0)

    def test_eigenvalues(self, grid16):
        ev = AdditiveNoiseSpec(1.5).eigenvalues(grid16)
        i = grid16.index_of((2, 1))
        assert ev[i] == pytest.approx(5.0**-1.5)
        assert ev[0, 0] == 0.0
        assert np.all(ev[~grid16.band] == 0)

    def test_transition_variance_formula(self, grid16):
        spec = AdditiveNoiseSpec(1.0)
        v = spec.transition_variance(grid16, 0.3)
        for m, lam in zip(MODES, (1, 2, 5)):
            assert v[grid16.index_of(m)] == pytest.approx(ou_variance(1.0, lam, 0.3), rel=1e-14)

    def test_two_half_steps_compose_to_one(self, grid16):
        spec = AdditiveNoiseSpec(1.0)
        dt = 0.2
        decay = np.exp(-grid16.ksq * dt / 2)
        half = spec.transition_variance(grid16, dt / 2)
        np.testing.assert_allclose(decay**2 * half + half, spec.transition_variance(grid16, dt), rtol=1e-14)


class TestStochasticConvolution:
    def test_starts_at_zero_and_stays_real_mean_free(self, grid16):
        z = zeros(grid16)
        s = RngStream(1)
        for _ in range(5):
            z = sample_stochastic_convolution_step(z, 0.01, AdditiveNoiseSpec(1.0), s)
        assert z.mean_coefficient == 0
        np.testing.assert_array_equal(np.conj(z.coeffs), mirror(z.coeffs))
        assert np.max(np.abs(np.fft.ifft2(z.coeffs).imag)) < 1e-12

    def test_rejects_bad_dt(self, grid16):
        with pytest.raises(ValueError):
            sample_stochastic_convolution_step(zeros(grid16), 0.0, AdditiveNoiseSpec(1.0), RngStream(0))

    def test_variance_at_time(self, grid16):
        t, n = 0.5, 10_000
        z = run_ou(grid16, AdditiveNoiseSpec(1.0), t, 0.05, n, RngStream(0, 0, "ou-var"))
        for m, lam in zip(MODES, (1, 2, 5)):
            x = np.abs(at_mode(z, grid16.index_of(m))) ** 2
            v = ou_variance(1.0, lam, t)
            # |c|^2 is exponential with mean v, so its standard error is v / sqrt(n)
            assert abs(x.mean() - v) < 3 * v / np.sqrt(n)

    def test_stationary_variance(self, grid16):
        spec = AdditiveNoiseSpec(1.0)
        n = 10_000
        z = run_ou(grid16, spec, 10.0, 1.0, n, RngStream(0, 0, "ou-stat"))
        stat = spec.stationary_variance(grid16)
        for m in MODES:
            i = grid16.index_of(m)
            x = np.abs(at_mode(z, i)) ** 2
            assert abs(x.mean() - stat[i]) < 3 * stat[i] / np.sqrt(n)

    def test_real_and_imaginary_parts_independent_halves(self, grid16):
        z = run_ou(grid16, AdditiveNoiseSpec(1.0), 1.0, 0.5, 20_000, RngStream(0, 0, "halves"))
        c = at_mode(z, grid16.index_of((1, 1)))
        assert abs(np.var(c.real) / np.var(c.imag) - 1) < 0.05
        assert abs(np.corrcoef(c.real, c.imag)[0, 1]) < 0.03

    def test_ks_two_half_steps_vs_one(self, grid16):
        spec = AdditiveNoiseSpec(1.0)
        z0 = np.zeros((16, 16), complex)
        for m in MODES:
            i, j = grid16.index_of(m)
            z0[i, j] = 0.4 - 0.2j
            z0[-i % 16, -j % 16] = 0.4 + 0.2j
        one = run_ou(grid16, spec, 0.2, 0.2, 10_000, RngStream(0, 0, "ks-one"), z0)
        two = run_ou(grid16, spec, 0.2, 0.1, 10_000, RngStream(0, 0, "ks-two"), z0)
        for m in MODES:
            i = grid16.index_of(m)
            for part in (np.real, np.imag):
                assert stats.ks_2samp(part(at_mode(one, i)), part(at_mode(two, i))).pvalue > 0.01

    def test_sup_lp_stable_under_refinement(self):
        spec = AdditiveNoiseSpec(1.0)
        out = []
        for n in (16, 32):
            g = TorusGrid(n)
            gen = RngStream(0, n, "refine").generator
            z = np.zeros((600, n, n), complex)
            sup = np.zeros(600)
            for _ in range(100):
                z = ou_step_coeffs(g, z, 0.01, spec, gen)
                sup = np.maximum(sup, lp_norm_samples(g, g.inverse(z), 4) ** 4)
            assert np.all(np.isfinite(sup))
            out.append(sup.mean())
        assert abs(out[1] / out[0] - 1) < 0.10


class TestSigmaFamilies:
    def test_shipped_families(self):
        assert set(SIGMA_FAMILIES) == {"constant", "linear", "sin", "saturated"}

    def test_constant(self, grid16):
        spec = MultiplicativeNoiseSpec("constant", (Channel((0, 0), "uniform", 1.0),))
        assert (spec.K, spec.L) == (1.0, 0.0)
        out = eval_sigma(spec, 0.0, RealField(grid16, np.random.default_rng(0).standard_normal((16, 16))))
        assert len(out) == 1
        np.testing.assert_array_equal(out[0].samples, 1.0)
        assert spec.is_state_independent()

    def test_linear(self, grid16):
        spec = MultiplicativeNoiseSpec("linear", (Channel((0, 0), "uniform", 1.0),))
        assert (spec.K, spec.L) == (1.0, 1.0)
        f = np.random.default_rng(1).standard_normal((16, 16))
        np.testing.assert_array_equal(eval_sigma(spec, 0.3, RealField(grid16, f))[0].samples, f)
        assert not spec.is_state_independent()

    def test_sin_randomized_lipschitz(self):
        rng = np.random.default_rng(2)
        r, s = rng.uniform(-50, 50, (2, 100_000))
        f = SIGMA_FAMILIES["sin"].func
        assert np.all(np.abs(f(r) - f(s)) <= np.abs(r - s) + 1e-15)

    @pytest.mark.parametrize("name", sorted(SIGMA_FAMILIES))
    def test_randomized_bounds(self, name):
        fam = SIGMA_FAMILIES[name]
        rng = np.random.default_rng(3)
        r, s = rng.standard_normal((2, 100_000)) * 20
        assert np.all(np.abs(fam.func(r)) <= fam.growth * (1 + np.abs(r)) + 1e-12)
        assert np.all(np.abs(fam.func(r) - fam.func(s)) <= fam.lipschitz * np.abs(r - s) + 1e-12)

    @pytest.mark.parametrize("name", sorted(SIGMA_FAMILIES))
    def test_derivatives(self, name):
        fam = SIGMA_FAMILIES[name]
        r = np.linspace(-3, 3, 61) + 0.013
        h = 1e-6
        np.testing.assert_allclose(fam.deriv(r), (fam.func(r + h) - fam.func(r - h)) / (2 * h), atol=1e-8)

    def test_channels_scale_constants(self):
        spec = MultiplicativeNoiseSpec("sin", (Channel((1, 0), "cos", 0.5), Channel((0, 1), "sin", 2.0)))
        assert spec.n == 2
        assert (spec.K, spec.L) == (2.0, 2.0)

    def test_understated_lipschitz_rejected(self):
        with pytest.raises(HypothesisViolation, match="Lipschitz"):
            MultiplicativeNoiseSpec("linear", (Channel(),), L=0.5)

    def test_understated_growth_rejected(self):
        with pytest.raises(HypothesisViolation, match="growth"):
            MultiplicativeNoiseSpec("constant", (Channel((0, 0), "uniform", 3.0),), K=0.5)

    def test_unknown_family(self):
        with pytest.raises(ValueError, match="unknown sigma family"):
            MultiplicativeNoiseSpec("cubic", (Channel(),))

    def test_needs_channels(self):
        with pytest.raises(ValueError):
            MultiplicativeNoiseSpec("sin", ())

    def test_profiles(self, grid16):
        spec = MultiplicativeNoiseSpec("saturated", (Channel((2, 1), "sin", 0.7),))
        x1, x2 = grid16.mesh
        np.testing.assert_allclose(spec.profiles(grid16)[0], 0.7 * np.sin(2 * x1 + x2))
        d = sigma_derivative_samples(spec, grid16, np.zeros((16, 16)))
        np.testing.assert_allclose(d[0], 0.7 * np.sin(2 * x1 + x2))


class TestWienerIncrements:
    def test_moments(self):
        dt, n = 0.01, 100_000
        w = wiener_increments(3, dt, RngStream(5, 0, "w"), size=(n,))
        assert w.shape == (n, 3)
        assert np.all(np.abs(w.mean(axis=0)) < 4 * np.sqrt(dt / n))
        assert np.all(np.abs(w.var(axis=0) / dt - 1) < 0.05)

    def test_reproducible(self):
        a = wiener_increments(4, 0.1, RngStream(9, 2, "w"))
        b = wiener_increments(4, 0.1, RngStream(9, 2, "w"))
        np.testing.assert_array_equal(a, b)

    def test_accepts_generator(self):
        w = wiener_increments(2, 0.5, np.random.default_rng(0))
        assert w.shape == (2,)

    def test_bad_dt(self):
        with pytest.raises(ValueError):
            wiener_increments(1, -0.1, RngStream(0))
