"""Transforms, masks, operators and norms on the torus."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vortex_ldp.torus import (
    NonFiniteFieldError,
    RealField,
    SpectralField,
    TorusGrid,
    from_function,
    hermitian_part,
    inner,
    l2_norm_coeffs,
    laplacian,
    lp_norm,
    mirror,
    random_band_field,
    sobolev_norm,
    to_real,
    to_spectral,
    zeros,
)


def cos_x1(x1, x2):
    return np.cos(x1)


class TestTorusGrid:
    @pytest.mark.parametrize("n", [3, 6, 12, 0, -8])
    def test_rejects_non_powers_of_two(self, n):
        with pytest.raises(ValueError, match="power of two"):
            TorusGrid(n)

    def test_rejects_bad_dealias_fraction(self):
        with pytest.raises(ValueError):
            TorusGrid(16, Fraction(3, 2))

    def test_resolvable_set(self):
        g = TorusGrid(16)
        k1, k2 = g.k1, g.k2
        expected = (np.abs(k1) <= 7) & (np.abs(k2) <= 7)
        np.testing.assert_array_equal(g.resolvable, expected)

    def test_dealias_mask_two_thirds(self):
        g = TorusGrid(16)
        cut = Fraction(2, 3) * 8
        expected = (np.abs(g.k1) <= cut) & (np.abs(g.k2) <= cut)
        np.testing.assert_array_equal(g.dealias_mask, expected)
        assert g.dealias_mask[g.index_of((5, 0))] and not g.dealias_mask[g.index_of((6, 0))]

    def test_band_excludes_mean(self):
        g = TorusGrid(8)
        assert not g.band[0, 0]

    def test_cell_area(self):
        g = TorusGrid(32)
        assert g.cell_area == pytest.approx((2 * np.pi / 32) ** 2)


class TestTransforms:
    def test_constant_field(self, grid16):
        g = to_spectral(RealField(grid16, np.ones((16, 16))))
        assert g.coefficient((0, 0)) == pytest.approx(2 * np.pi, abs=1e-13)
        rest = g.coeffs.copy()
        rest[0, 0] = 0
        assert np.max(np.abs(rest)) < 1e-13

    def test_cos_coefficients(self, grid16):
        g = from_function(grid16, cos_x1)
        assert g.coefficient((1, 0)) == pytest.approx(np.pi, abs=1e-13)
        assert g.coefficient((-1, 0)) == pytest.approx(np.pi, abs=1e-13)
        rest = g.coeffs.copy()
        rest[grid16.index_of((1, 0))] = rest[grid16.index_of((-1, 0))] = 0
        assert np.max(np.abs(rest)) < 1e-13

    def test_cos_coefficient_matches_direct_sum(self, grid16):
        # oracle: g_eta = sum_x f(x) e^{-i eta.x} / (2 pi) * cell area
        x1, x2 = grid16.mesh
        f = np.cos(x1)
        direct = np.sum(f * np.exp(-1j * x1)) / (2 * np.pi) * grid16.cell_area
        assert from_function(grid16, cos_x1).coefficient((1, 0)) == pytest.approx(direct, abs=1e-13)

    def test_round_trip(self, grid16, rng):
        f = RealField(grid16, rng.standard_normal((16, 16)))
        back = to_real(to_spectral(f))
        assert np.max(np.abs(back.samples - f.samples)) <= 1e-12 * np.max(np.abs(f.samples))

    def test_reality_enforced_exactly(self, grid16, rng):
        g = to_spectral(RealField(grid16, rng.standard_normal((16, 16))))
        np.testing.assert_array_equal(np.conj(g.coeffs), mirror(g.coeffs))

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, grid16, bad):
        s = np.zeros((16, 16))
        s[3, 4] = bad
        with pytest.raises(NonFiniteFieldError, match="1 non-finite"):
            to_spectral(RealField(grid16, s))

    def test_shape_mismatch(self, grid16):
        with pytest.raises(ValueError):
            RealField(grid16, np.zeros((8, 8)))

    def test_fields_are_immutable(self, grid16):
        g = zeros(grid16)
        with pytest.raises(ValueError):
            g.coeffs[0, 0] = 1.0

    def test_hermitian_part_idempotent(self, rng):
        c = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
        h = hermitian_part(c)
        np.testing.assert_allclose(hermitian_part(h), h, atol=1e-15)


class TestLaplacian:
    def test_cos_eigenfunction(self, grid16):
        g = from_function(grid16, cos_x1)
        np.testing.assert_allclose(to_real(laplacian(g)).samples, -to_real(g).samples, atol=1e-13)

    def test_constant_to_zero(self, grid16):
        g = to_spectral(RealField(grid16, np.full((16, 16), 3.0)))
        assert np.max(np.abs(laplacian(g).coeffs)) == 0.0

    def test_mode_scaled_by_minus_five(self):
        g = TorusGrid(256)
        f = from_function(g, lambda x1, x2: np.cos(2 * x1 + x2))
        lap = to_real(laplacian(f)).samples
        s = to_real(f).samples
        h = g.spacing
        fd = (np.roll(s, 1, 0) + np.roll(s, -1, 0) + np.roll(s, 1, 1) + np.roll(s, -1, 1) - 4 * s) / h**2
        # centered differences carry an O(h^2) error of about |eta|^4 h^2 / 12
        assert np.max(np.abs(lap + 5 * s)) < 1e-10
        assert np.max(np.abs(fd - lap)) < 25 * h**2 / 12 * 1.01
        assert np.max(np.abs(fd - lap)) < 1e-2

    def test_second_order_convergence(self):
        errs = []
        for n in (32, 64, 128):
            g = TorusGrid(n)
            f = from_function(g, lambda x1, x2: np.sin(x1) * np.cos(2 * x2))
            s = to_real(f).samples
            h = g.spacing
            fd = (np.roll(s, 1, 0) + np.roll(s, -1, 0) + np.roll(s, 1, 1) + np.roll(s, -1, 1) - 4 * s) / h**2
            errs.append(np.max(np.abs(fd - to_real(laplacian(f)).samples)))
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(orders > 1.9)

    def test_preserves_reality_and_mean(self, grid16, rng):
        g = SpectralField(grid16, random_band_field(grid16, rng))
        lap = laplacian(g)
        np.testing.assert_allclose(np.conj(lap.coeffs), mirror(lap.coeffs), atol=1e-15)
        assert lap.mean_coefficient == 0


class TestNorms:
    def test_sobolev_l2_of_cos(self, grid16):
        g = from_function(grid16, cos_x1)
        assert sobolev_norm(g, 0.0) == pytest.approx(np.pi * np.sqrt(2), rel=1e-14)
        assert sobolev_norm(g, 1.0) == pytest.approx(np.pi * np.sqrt(2), rel=1e-14)

    def test_sobolev_zero(self, grid16):
        assert sobolev_norm(zeros(grid16), 1.5) == 0.0

    def test_sobolev_monotone_in_a(self, grid16, rng):
        g = SpectralField(grid16, random_band_field(grid16, rng))
        vals = [sobolev_norm(g, a) for a in (0.0, 0.5, 1.0, 2.0)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_sobolev_batched(self, grid16, rng):
        c = random_band_field(grid16, rng, size=(3,))
        out = sobolev_norm(SpectralField(grid16, c), 1.0)
        assert out.shape == (3,)
        assert out[1] == pytest.approx(sobolev_norm(SpectralField(grid16, c[1]), 1.0))

    @pytest.mark.parametrize("p", [1.0, 2.0, 3.5, 8.0])
    def test_lp_constant(self, grid16, p):
        f = RealField(grid16, np.ones((16, 16)))
        assert lp_norm(f, p) == pytest.approx((4 * np.pi**2) ** (1 / p), rel=1e-14)

    def test_lp_cos(self, grid16):
        f = to_real(from_function(grid16, cos_x1))
        assert lp_norm(f, 2) == pytest.approx(np.pi * np.sqrt(2), rel=1e-14)
        assert lp_norm(f, np.inf) == pytest.approx(1.0, rel=1e-14)
        # int cos^4 = (3/8) 4 pi^2, exact for the lattice rule at n = 16
        assert lp_norm(f, 4) == pytest.approx((1.5 * np.pi**2) ** 0.25, rel=1e-14)

    def test_lp_rejects_p_below_one(self, grid16):
        with pytest.raises(ValueError):
            lp_norm(RealField(grid16, np.ones((16, 16))), 0.5)

    def test_parseval_random_fields(self):
        g = TorusGrid(32)
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(100):
            f = RealField(g, rng.standard_normal((32, 32)))
            c = to_spectral(f).coeffs
            worst = max(worst, abs(lp_norm(f, 2) ** 2 / l2_norm_coeffs(c) ** 2 - 1))
        assert worst < 1e-10

    def test_inner_matches_norm(self, grid16, rng):
        f = RealField(grid16, rng.standard_normal((16, 16)))
        assert inner(f, f) == pytest.approx(lp_norm(f, 2) ** 2, rel=1e-13)


class TestRandomBandField:
    def test_support_and_reality(self, grid16, rng):
        c = random_band_field(grid16, rng, slope=1.5, size=(4,))
        assert np.all(c[..., ~grid16.band] == 0)
        np.testing.assert_array_equal(np.conj(c), mirror(c))

    def test_seeded_reproducible(self, grid16):
        a = random_band_field(grid16, np.random.default_rng(5))
        b = random_band_field(grid16, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), slope=st.floats(0.0, 3.0))
def test_transform_round_trip_property(seed, slope):
    g = TorusGrid(16)
    c = random_band_field(g, np.random.default_rng(seed), slope=slope)
    back = to_spectral(to_real(SpectralField(g, c))).coeffs
    assert np.max(np.abs(back - c)) <= 1e-12 * max(1.0, np.max(np.abs(c)))
