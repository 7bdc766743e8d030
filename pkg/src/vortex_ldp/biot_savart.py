"""Velocity reconstruction ``u = k * xi`` and the quadratic term ``q(xi) = xi u``.

Per mode the velocity is ``u_eta = -i eta_perp xi_eta / |eta|^2`` with
``eta_perp = (-eta_2, eta_1)``. The product ``xi u`` is formed on the
collocation lattice and dealiased, so the singular kernel ``k`` is never
evaluated in physical space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .torus import (
    SpectralField,
    TorusGrid,
    hermitian_part,
    lp_norm_samples,
    random_band_field,
)


class NonZeroMeanError(ValueError):
    """Raised when a vorticity with a nonzero mean is passed to the Biot-Savart map."""


@dataclass(frozen=True)
class VelocitySpectral:
    """Two-component coefficient array of shape ``(..., 2, n, n)``.

    Holds both the velocity ``u`` (solenoidal, checked by
    :func:`max_divergence`) and the flux ``q(xi)``, which is not solenoidal.
    """

    grid: TorusGrid
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape[-3:] != (2, self.grid.n, self.grid.n):
            raise ValueError(f"expected trailing shape (2, {self.grid.n}, {self.grid.n}), got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    def samples(self) -> np.ndarray:
        return self.grid.inverse(self.coeffs)


def _mean_scale(coeffs: np.ndarray) -> float:
    return max(1.0, float(np.max(np.abs(coeffs))))


def velocity_coeffs(grid: TorusGrid, xi: np.ndarray) -> np.ndarray:
    """Raw Biot-Savart map on coefficient arrays (no mean check)."""
    w = -1j * grid.inv_ksq * xi
    u1 = w * (-grid.k2)
    u2 = w * grid.k1
    return np.stack([u1, u2], axis=-3)


def velocity_from_vorticity(xi: SpectralField, tol: float = 1e-12) -> VelocitySpectral:
    """Biot-Savart velocity of a zero-mean vorticity."""
    mean = np.max(np.abs(xi.coeffs[..., 0, 0]))
    if mean > tol * _mean_scale(xi.coeffs):
        raise NonZeroMeanError(f"vorticity mean coefficient {mean:.3e} is not zero")
    return VelocitySpectral(xi.grid, velocity_coeffs(xi.grid, xi.coeffs))


def curl(u: VelocitySpectral) -> SpectralField:
    """Scalar curl ``d1 u2 - d2 u1``."""
    g = u.grid
    c = 1j * g.k1 * u.coeffs[..., 1, :, :] - 1j * g.k2 * u.coeffs[..., 0, :, :]
    return SpectralField(g, c)


def divergence_coeffs(grid: TorusGrid, v: np.ndarray) -> np.ndarray:
    return 1j * grid.k1 * v[..., 0, :, :] + 1j * grid.k2 * v[..., 1, :, :]


def divergence(v: VelocitySpectral) -> SpectralField:
    return SpectralField(v.grid, divergence_coeffs(v.grid, v.coeffs))


def max_divergence(u: VelocitySpectral) -> float:
    """``max_eta |eta . u_eta|``."""
    return float(np.max(np.abs(divergence_coeffs(u.grid, u.coeffs))))


def q_coeffs(grid: TorusGrid, xi: np.ndarray, xi_samples: np.ndarray | None = None) -> np.ndarray:
    """Dealiased coefficients of ``xi * (k * xi)`` for raw coefficient arrays."""
    if xi_samples is None:
        xi_samples = grid.inverse(xi)
    u = grid.inverse(velocity_coeffs(grid, xi))
    prod = xi_samples[..., None, :, :] * u
    return grid.dealias(hermitian_part(grid.forward(prod)))


def nonlinearity_q(xi: SpectralField) -> VelocitySpectral:
    """Pseudospectral ``q(xi) = xi (k * xi)``, dealiased."""
    velocity_from_vorticity(xi)
    return VelocitySpectral(xi.grid, q_coeffs(xi.grid, xi.coeffs))


def transport_coeffs(grid: TorusGrid, xi: np.ndarray, xi_samples: np.ndarray | None = None) -> np.ndarray:
    """Right-hand side ``-div q(xi) = -u . grad xi`` of the vorticity equation."""
    return -divergence_coeffs(grid, q_coeffs(grid, xi, xi_samples))


def linf_bound_check(xi: SpectralField, p: float) -> tuple[float, float]:
    """Return ``||u||_inf`` and ``||u||_inf / ||xi||_p`` (``(0, 0)`` for zero input).

    The sup norm is taken over lattice points, with ``|u|`` the Euclidean
    length of the velocity vector.
    """
    if p <= 2:
        raise ValueError(f"p must exceed 2, got {p}")
    grid = xi.grid
    u = grid.inverse(velocity_from_vorticity(xi).coeffs)
    lhs = float(np.max(np.hypot(u[..., 0, :, :], u[..., 1, :, :])))
    denom = float(lp_norm_samples(grid, grid.inverse(xi.coeffs), p))
    if denom == 0.0:
        return lhs, 0.0
    return lhs, lhs / denom


def linf_ratio_ensemble(grid: TorusGrid, p: float, count: int, rng: np.random.Generator,
                        slope: float = 1.0) -> np.ndarray:
    """Ratios ``||u||_inf / ||xi||_p`` over ``count`` random band-limited vorticities."""
    out = np.empty(count)
    for i in range(count):
        xi = SpectralField(grid, random_band_field(grid, rng, slope=slope))
        out[i] = linf_bound_check(xi, p)[1]
    return out

