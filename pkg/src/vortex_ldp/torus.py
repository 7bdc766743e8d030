"""Grids, transforms, differential operators and norms on the 2pi-periodic torus.

Coefficient convention
----------------------
A real field ``f`` is expanded in the orthonormal basis
``e_eta(x) = exp(i eta.x) / (2 pi)``::

    f(x) = sum_eta g_eta e_eta(x)

so a constant 1 has ``g_0 = 2 pi`` and ``cos(x1)`` has ``g_(+-1,0) = pi``.
With this choice Parseval reads ``||f||_2^2 = sum |g_eta|^2`` and the
collocation quadrature ``(2 pi / N)^2 sum f^2`` reproduces it exactly.

Coefficient arrays use FFT ordering on the last two axes (axis -2 is the
``x1`` wavenumber, axis -1 the ``x2`` wavenumber). Any number of leading
batch axes is allowed; every operator here broadcasts over them.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

import numpy as np
from scipy import fft as sfft

TWO_PI = 2.0 * np.pi


class NonFiniteFieldError(ValueError):
    """Raised when a field contains NaN or infinite samples."""


@dataclass(frozen=True)
class TorusGrid:
    """Square collocation grid on [0, 2pi)^2 with ``n`` points per axis.

    Parameters
    ----------
    n : int
        Points (and modes) per axis. Must be an even power of two.
    dealias_fraction : Fraction
        Modes with ``|eta_i| > dealias_fraction * n/2`` are removed by
        :meth:`dealias`. Defaults to the 2/3 rule.
    """

    n: int
    dealias_fraction: Fraction = Fraction(2, 3)

    def __post_init__(self):
        n = self.n
        if not isinstance(n, (int, np.integer)) or n < 4 or n & (n - 1):
            raise ValueError(f"grid size must be a power of two >= 4, got {n!r}")
        frac = Fraction(self.dealias_fraction)
        if not 0 < frac <= 1:
            raise ValueError(f"dealias_fraction must lie in (0, 1], got {frac}")
        object.__setattr__(self, "n", int(n))
        object.__setattr__(self, "dealias_fraction", frac)

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """Integer wavenumbers along one axis in FFT order."""
        return np.fft.fftfreq(self.n, 1.0 / self.n).round().astype(np.int64)

    @cached_property
    def k1(self) -> np.ndarray:
        return np.broadcast_to(self.wavenumbers[:, None], (self.n, self.n))

    @cached_property
    def k2(self) -> np.ndarray:
        return np.broadcast_to(self.wavenumbers[None, :], (self.n, self.n))

    @cached_property
    def ksq(self) -> np.ndarray:
        """|eta|^2 for every stored mode."""
        return (self.k1**2 + self.k2**2).astype(float)

    @cached_property
    def inv_ksq(self) -> np.ndarray:
        """1/|eta|^2 with the zero mode mapped to 0."""
        out = np.zeros_like(self.ksq)
        nz = self.ksq > 0
        out[nz] = 1.0 / self.ksq[nz]
        return out

    @cached_property
    def resolvable(self) -> np.ndarray:
        """Boolean mask of modes with ``|eta_i| <= n/2 - 1``."""
        lim = self.n // 2 - 1
        return (np.abs(self.k1) <= lim) & (np.abs(self.k2) <= lim)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """Boolean mask of modes kept after dealiasing (mean mode included)."""
        cut = self.dealias_fraction * (self.n // 2)
        keep = (np.abs(self.k1) <= cut) & (np.abs(self.k2) <= cut)
        return keep & self.resolvable

    @cached_property
    def band(self) -> np.ndarray:
        """Dealiased, zero-mean modes: the support of every dynamical field."""
        return self.dealias_mask & (self.ksq > 0)

    @property
    def spacing(self) -> float:
        return TWO_PI / self.n

    @property
    def cell_area(self) -> float:
        return self.spacing**2

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.arange(self.n) * self.spacing
        return np.meshgrid(x, x, indexing="ij")

    def index_of(self, mode: tuple[int, int]) -> tuple[int, int]:
        """Array index of wavenumber ``mode`` in FFT order."""
        return int(mode[0]) % self.n, int(mode[1]) % self.n

    # raw array transforms -------------------------------------------------

    def forward(self, samples: np.ndarray) -> np.ndarray:
        """Samples -> coefficients, without the reality projection."""
        return sfft.fft2(samples, axes=(-2, -1)) * (TWO_PI / self.n**2)

    def inverse(self, coeffs: np.ndarray) -> np.ndarray:
        """Coefficients -> real samples (imaginary round-off discarded)."""
        return sfft.ifft2(coeffs, axes=(-2, -1)).real * (self.n**2 / TWO_PI)

    def dealias(self, coeffs: np.ndarray) -> np.ndarray:
        return np.where(self.dealias_mask, coeffs, 0.0)

    def project_band(self, coeffs: np.ndarray) -> np.ndarray:
        """Dealias and remove the mean mode."""
        return np.where(self.band, coeffs, 0.0)


def mirror(coeffs: np.ndarray) -> np.ndarray:
    """Return ``c[-eta]`` for every ``eta`` (FFT order, last two axes)."""
    return np.roll(np.flip(coeffs, axis=(-2, -1)), 1, axis=(-2, -1))


def hermitian_part(coeffs: np.ndarray) -> np.ndarray:
    """Average conjugate pairs so that ``conj(g_eta) == g_{-eta}`` exactly."""
    return 0.5 * (coeffs + np.conj(mirror(coeffs)))


@dataclass(frozen=True)
class RealField:
    """Real samples on the ``n x n`` collocation lattice (leading batch axes allowed)."""

    grid: TorusGrid
    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.shape[-2:] != (self.grid.n, self.grid.n):
            raise ValueError(f"samples shape {s.shape} does not match grid n={self.grid.n}")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)


@dataclass(frozen=True)
class SpectralField:
    """Fourier coefficients ``g_eta`` of a real scalar field."""

    grid: TorusGrid
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape[-2:] != (self.grid.n, self.grid.n):
            raise ValueError(f"coeffs shape {c.shape} does not match grid n={self.grid.n}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    def coefficient(self, mode: tuple[int, int]) -> complex:
        return complex(self.coeffs[(..., *self.grid.index_of(mode))])

    @property
    def mean_coefficient(self) -> complex:
        return complex(self.coeffs[..., 0, 0])

    def __add__(self, other: "SpectralField") -> "SpectralField":
        return SpectralField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        return SpectralField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, scalar: float) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs * scalar)

    __rmul__ = __mul__


def to_spectral(f: RealField) -> SpectralField:
    """Forward transform with exact enforcement of the reality condition."""
    if not np.all(np.isfinite(f.samples)):
        bad = int(np.count_nonzero(~np.isfinite(f.samples)))
        raise NonFiniteFieldError(f"{bad} non-finite sample(s) in field on n={f.grid.n} grid")
    return SpectralField(f.grid, hermitian_part(f.grid.forward(f.samples)))


def to_real(g: SpectralField) -> RealField:
    return RealField(g.grid, g.grid.inverse(g.coeffs))


def from_function(grid: TorusGrid, func) -> SpectralField:
    """Sample ``func(x1, x2)`` on the lattice and transform."""
    x1, x2 = grid.mesh
    return to_spectral(RealField(grid, np.broadcast_to(func(x1, x2), (grid.n, grid.n))))


def zeros(grid: TorusGrid) -> SpectralField:
    return SpectralField(grid, np.zeros((grid.n, grid.n), dtype=complex))


def laplacian(g: SpectralField) -> SpectralField:
    return SpectralField(g.grid, -g.grid.ksq * g.coeffs)


def gradient_coeffs(grid: TorusGrid, coeffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Spectral partial derivatives; Nyquist lines are zeroed to keep them real."""
    keep = grid.resolvable
    d1 = np.where(keep, 1j * grid.k1 * coeffs, 0.0)
    d2 = np.where(keep, 1j * grid.k2 * coeffs, 0.0)
    return d1, d2


def sobolev_norm(g: SpectralField, a: float):
    """``(sum_{eta != 0} |eta|^{2a} |g_eta|^2)^{1/2}``; equals the L2 norm at ``a = 0`` for zero-mean ``g``.

    Returns a float for a single field and an array for batched input.
    """
    grid = g.grid
    nz = grid.ksq > 0
    w = np.where(nz, grid.ksq, 1.0) ** a
    out = np.sqrt(np.sum(np.where(nz, w * np.abs(g.coeffs) ** 2, 0.0), axis=(-2, -1)))
    return float(out) if out.ndim == 0 else out


def l2_norm_coeffs(coeffs: np.ndarray) -> np.ndarray:
    """Parseval L2 norm over the last two axes."""
    return np.sqrt(np.sum(np.abs(coeffs) ** 2, axis=(-2, -1)))


def lp_norm_samples(grid: TorusGrid, samples: np.ndarray, p: float) -> np.ndarray:
    """Quadrature L^p norm over the last two axes; ``p = inf`` gives the sup norm."""
    a = np.abs(samples)
    if np.isinf(p):
        return a.max(axis=(-2, -1))
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if p == 2:
        return np.sqrt(np.sum(a * a, axis=(-2, -1)) * grid.cell_area)
    return (np.sum(a**p, axis=(-2, -1)) * grid.cell_area) ** (1.0 / p)


def lp_norm(f: RealField, p: float) -> float:
    """L^p norm by the lattice quadrature ``(sum |f|^p) (2pi/N)^2``."""
    return float(lp_norm_samples(f.grid, f.samples, p))


def inner(f: RealField, h: RealField) -> float:
    """L2 inner product by lattice quadrature."""
    return float(np.sum(f.samples * h.samples) * f.grid.cell_area)


def random_band_field(
    grid: TorusGrid,
    rng: np.random.Generator,
    slope: float = 1.0,
    size: tuple[int, ...] = (),
) -> np.ndarray:
    """Random real zero-mean coefficients supported on the dealiased band.

    Coefficient variance decays like ``|eta|^{-2 slope}``. Returns a raw
    coefficient array of shape ``size + (n, n)``.
    """
    shape = tuple(size) + (grid.n, grid.n)
    amp = np.where(grid.band, np.where(grid.ksq > 0, grid.ksq, 1.0) ** (-slope / 2), 0.0)
    z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return hermitian_part(amp * z)
