"""Additive Q-Wiener noise and finite-dimensional multiplicative noise channels.

Additive noise has covariance ``Q = (-Laplacian)^{-a}``; its stochastic
convolution is advanced mode by mode with the exact Ornstein-Uhlenbeck
transition. Multiplicative noise is driven by ``n`` scalar Brownian
motions, channel ``j`` entering through

    sigma_j(t, x, r) = amplitude_j * profile_j(x) * f(r)

where ``f`` is one of the built-in families below and ``profile_j`` is a
single Fourier mode (``cos`` or ``sin``) or the constant 1.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

from .torus import RealField, SpectralField, TorusGrid, hermitian_part


# -- random streams -------------------------------------------------------------

def _purpose_code(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


@dataclass
class RngStream:
    """A reproducible random stream keyed by ``(seed, index, purpose)``.

    ``index`` is the trajectory (or ensemble block) index and ``purpose`` a
    short tag such as ``"wiener"`` or ``"init"``. Two streams with equal keys
    produce identical draws.
    """

    seed: int
    index: int = 0
    purpose: str = "wiener"
    _gen: np.random.Generator | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.index), _purpose_code(self.purpose)))
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def child(self, index: int, purpose: str | None = None) -> "RngStream":
        return RngStream(self.seed, index, purpose or self.purpose)


# -- additive noise ---------------------------------------------------------------

@dataclass(frozen=True)
class AdditiveNoiseSpec:
    """Q-Wiener noise with ``Q e_eta = |eta|^{-2a} e_eta``."""

    a: float

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"additive noise needs a > 0, got {self.a}")

    def eigenvalues(self, grid: TorusGrid) -> np.ndarray:
        """Covariance eigenvalues on the dynamical band (zero elsewhere)."""
        ksq = np.where(grid.ksq > 0, grid.ksq, 1.0)
        return np.where(grid.band, ksq ** (-self.a), 0.0)

    def transition_variance(self, grid: TorusGrid, dt: float) -> np.ndarray:
        """``E|increment_eta|^2`` of one exact OU step of length ``dt``."""
        lam = np.where(grid.ksq > 0, grid.ksq, 1.0)
        return self.eigenvalues(grid) * -np.expm1(-2.0 * lam * dt) / (2.0 * lam)

    def stationary_variance(self, grid: TorusGrid) -> np.ndarray:
        lam = np.where(grid.ksq > 0, grid.ksq, 1.0)
        return self.eigenvalues(grid) / (2.0 * lam)


def complex_gaussian(grid: TorusGrid, variance: np.ndarray, rng: np.random.Generator,
                     size: tuple[int, ...] = ()) -> np.ndarray:
    """Hermitian Gaussian coefficients with ``E|c_eta|^2 = variance_eta``.

    Independent draws are symmetrized as ``(w_eta + conj(w_{-eta})) / sqrt 2``,
    which gives each conjugate pair independent real and imaginary parts of
    variance ``variance_eta / 2``.
    """
    shape = tuple(size) + (grid.n, grid.n)
    w = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.sqrt(0.5)
    return np.sqrt(2.0) * hermitian_part(w) * np.sqrt(variance)


def ou_step_coeffs(grid: TorusGrid, zeta: np.ndarray, dt: float, spec: AdditiveNoiseSpec,
                   rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Exact-in-law OU update on raw (possibly batched) coefficient arrays."""
    decay = np.exp(-grid.ksq * dt)
    noise = complex_gaussian(grid, spec.transition_variance(grid, dt), rng, zeta.shape[:-2])
    return decay * zeta + scale * noise


def sample_stochastic_convolution_step(zeta: SpectralField, dt: float, spec: AdditiveNoiseSpec,
                                       rng: RngStream) -> SpectralField:
    """Advance the stochastic convolution by ``dt``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return SpectralField(zeta.grid, ou_step_coeffs(zeta.grid, zeta.coeffs, dt, spec, rng.generator))


# -- multiplicative noise ------------------------------------------------------------

@dataclass(frozen=True)
class SigmaFamily:
    name: str
    func: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    growth: float
    lipschitz: float


SIGMA_FAMILIES: dict[str, SigmaFamily] = {
    "constant": SigmaFamily("constant", np.ones_like, np.zeros_like, 1.0, 0.0),
    "linear": SigmaFamily("linear", lambda r: np.asarray(r, dtype=float), np.ones_like, 1.0, 1.0),
    "sin": SigmaFamily("sin", np.sin, np.cos, 1.0, 1.0),
    "saturated": SigmaFamily(
        "saturated",
        lambda r: r / (1.0 + np.abs(r)),
        lambda r: 1.0 / (1.0 + np.abs(r)) ** 2,
        1.0,
        1.0,
    ),
}


@dataclass(frozen=True)
class Channel:
    """Spatial profile of one noise channel."""

    mode: tuple[int, int] = (1, 0)
    kind: Literal["cos", "sin", "uniform"] = "cos"
    amplitude: float = 1.0

    def samples(self, grid: TorusGrid) -> np.ndarray:
        if self.kind == "uniform":
            return np.full((grid.n, grid.n), float(self.amplitude))
        x1, x2 = grid.mesh
        phase = self.mode[0] * x1 + self.mode[1] * x2
        wave = np.cos(phase) if self.kind == "cos" else np.sin(phase)
        return self.amplitude * wave


class HypothesisViolation(ValueError):
    """Raised when declared growth/Lipschitz constants do not hold for a family."""


@dataclass(frozen=True)
class MultiplicativeNoiseSpec:
    """``n`` channels sharing one sigma family; ``K``/``L`` default to the family's constants."""

    family: str
    channels: tuple[Channel, ...]
    K: float | None = None
    L: float | None = None
    check_pairs: int = 10_000

    def __post_init__(self):
        if self.family not in SIGMA_FAMILIES:
            raise ValueError(f"unknown sigma family {self.family!r}; choose from {sorted(SIGMA_FAMILIES)}")
        if not self.channels:
            raise ValueError("at least one noise channel is required")
        object.__setattr__(self, "channels", tuple(self.channels))
        amp = max(abs(c.amplitude) for c in self.channels)
        fam = SIGMA_FAMILIES[self.family]
        if self.K is None:
            object.__setattr__(self, "K", fam.growth * amp)
        if self.L is None:
            object.__setattr__(self, "L", fam.lipschitz * amp)
        self._verify_constants()

    @property
    def n(self) -> int:
        return len(self.channels)

    @property
    def sigma_family(self) -> SigmaFamily:
        return SIGMA_FAMILIES[self.family]

    def _verify_constants(self):
        # profiles are bounded by |amplitude|, so the scalar check suffices
        rng = np.random.default_rng(0x5EED)
        fam = self.sigma_family
        amp = max(abs(c.amplitude) for c in self.channels)
        r = rng.standard_normal(self.check_pairs) * 10.0
        s = rng.standard_normal(self.check_pairs) * 10.0
        fr, fs = amp * fam.func(r), amp * fam.func(s)
        slack = 1e-12
        if np.any(np.abs(fr) > self.K * (1 + np.abs(r)) + slack):
            raise HypothesisViolation(f"family {self.family!r} violates growth bound K={self.K}")
        if np.any(np.abs(fr - fs) > self.L * np.abs(r - s) + slack):
            raise HypothesisViolation(f"family {self.family!r} violates Lipschitz bound L={self.L}")

    def profiles(self, grid: TorusGrid) -> np.ndarray:
        return _profiles(self, grid)

    def is_state_independent(self) -> bool:
        return self.family == "constant"


_PROFILE_CACHE: dict = {}


def _profiles(spec: MultiplicativeNoiseSpec, grid: TorusGrid) -> np.ndarray:
    key = (spec.channels, grid)
    if key not in _PROFILE_CACHE:
        _PROFILE_CACHE[key] = np.stack([c.samples(grid) for c in spec.channels])
    return _PROFILE_CACHE[key]


def sigma_samples(spec: MultiplicativeNoiseSpec, grid: TorusGrid, xi_samples: np.ndarray) -> np.ndarray:
    """``sigma_j(x, xi(x))`` on the lattice, shape ``batch + (n, N, N)``."""
    f = spec.sigma_family.func(xi_samples)
    return spec.profiles(grid) * f[..., None, :, :]


def sigma_derivative_samples(spec: MultiplicativeNoiseSpec, grid: TorusGrid, xi_samples: np.ndarray) -> np.ndarray:
    """``d sigma_j / dr`` on the lattice."""
    d = spec.sigma_family.deriv(xi_samples)
    return spec.profiles(grid) * d[..., None, :, :]


def eval_sigma(spec: MultiplicativeNoiseSpec, t: float, field: RealField) -> list[RealField]:
    """Pointwise ``sigma_j(t, x, field(x))`` for every channel (time-homogeneous families)."""
    vals = sigma_samples(spec, field.grid, field.samples)
    return [RealField(field.grid, vals[..., j, :, :]) for j in range(spec.n)]


def wiener_increments(n: int, dt: float, rng: RngStream | np.random.Generator,
                      size: Sequence[int] = ()) -> np.ndarray:
    """I.i.d. ``N(0, dt)`` increments of an ``n``-dimensional Brownian motion."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    gen = rng.generator if isinstance(rng, RngStream) else rng
    return gen.standard_normal(tuple(size) + (n,)) * np.sqrt(dt)


NoiseSpec = AdditiveNoiseSpec | MultiplicativeNoiseSpec | None
