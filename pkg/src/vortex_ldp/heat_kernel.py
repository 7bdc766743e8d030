"""Torus heat kernel, heat semigroup, and scaling-exponent harnesses.

The kernel on ``[0, 2pi]^2`` factorizes into one-dimensional circle
kernels, ``G(t, dx) = h(t, dx1) h(t, dx2)``, and each factor is evaluated
either as a cosine (theta) series or as a sum over periodic images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .biot_savart import VelocitySpectral
from .torus import TWO_PI, RealField, SpectralField, TorusGrid, lp_norm_samples

Representation = Literal["fourier", "images", "auto"]

# exp(-40) ~ 4e-18: truncation tail below double precision relative to the leading term
_TAIL = 40.0
SWITCH_TIME = 0.1


class KernelDomainError(ValueError):
    """Raised for non-positive times."""


class UnderResolvedError(ValueError):
    """Raised when a quadrature grid cannot resolve the kernel width."""

    def __init__(self, s: float, n: int, required: int):
        self.s, self.n, self.required = s, n, required
        super().__init__(
            f"grid n={n} resolves sqrt(s)={math.sqrt(s):.3g} with fewer than 8 cells; "
            f"need n >= {required}"
        )


def fourier_radius(t: float) -> int:
    return int(math.ceil(math.sqrt(_TAIL / t))) + 1


def image_shells(t: float) -> int:
    return int(math.ceil(math.sqrt(4.0 * _TAIL * t) / TWO_PI)) + 1


def _wrap(x):
    """Map displacements into [-pi, pi)."""
    return (np.asarray(x, dtype=float) + np.pi) % TWO_PI - np.pi


def _circle_fourier(t: float, x: np.ndarray, radius: int, deriv: bool = False) -> np.ndarray:
    k = np.arange(1, radius + 1, dtype=float)
    w = np.exp(-t * k * k)
    kx = np.multiply.outer(x, k)
    if deriv:
        return -(np.sin(kx) * (k * w)).sum(axis=-1) / np.pi
    return (1.0 + 2.0 * (np.cos(kx) * w).sum(axis=-1)) / TWO_PI


def _circle_images(t: float, x: np.ndarray, shells: int, deriv: bool = False) -> np.ndarray:
    acc = np.zeros_like(x, dtype=float)
    norm = 1.0 / math.sqrt(4.0 * np.pi * t)
    for m in range(-shells, shells + 1):
        y = x + TWO_PI * m
        g = np.exp(-(y * y) / (4.0 * t))
        acc += (-y / (2.0 * t)) * g if deriv else g
    return norm * acc


def circle_kernel(t: float, x, rep: Representation = "auto", truncation: int | None = None,
                  deriv: bool = False) -> np.ndarray:
    """One-dimensional heat kernel on the circle of length 2pi (or its x-derivative)."""
    if not t > 0:
        raise KernelDomainError(f"heat kernel needs t > 0, got {t}")
    x = _wrap(x)
    if rep == "auto":
        rep = "images" if t < SWITCH_TIME else "fourier"
    if rep == "fourier":
        return _circle_fourier(t, x, truncation or fourier_radius(t), deriv)
    if rep == "images":
        return _circle_images(t, x, image_shells(t) if truncation is None else truncation, deriv)
    raise ValueError(f"unknown representation {rep!r}")


def kernel_value(t: float, dx, rep: Representation = "auto", truncation: int | None = None) -> np.ndarray:
    """``G(t, x, y)`` as a function of the displacement ``dx = x - y`` (last axis of size 2).

    ``truncation`` is the mode radius per axis (fourier) or the number of
    image shells per axis (images); by default both are chosen so the
    neglected tail is below 1e-17 relative.
    """
    dx = np.asarray(dx, dtype=float)
    h1 = circle_kernel(t, dx[..., 0], rep, truncation)
    h2 = circle_kernel(t, dx[..., 1], rep, truncation)
    return h1 * h2


def kernel_gradient(t: float, dx, rep: Representation = "auto", truncation: int | None = None) -> np.ndarray:
    """``grad_x G(t, x, y)``; note ``grad_y G = -grad_x G``."""
    dx = np.asarray(dx, dtype=float)
    h1 = circle_kernel(t, dx[..., 0], rep, truncation)
    h2 = circle_kernel(t, dx[..., 1], rep, truncation)
    d1 = circle_kernel(t, dx[..., 0], rep, truncation, deriv=True)
    d2 = circle_kernel(t, dx[..., 1], rep, truncation, deriv=True)
    return np.stack([d1 * h2, h1 * d2], axis=-1)


def semigroup_apply(t: float, g: SpectralField) -> SpectralField:
    """Heat semigroup ``S(t) = exp(t Laplacian)`` on coefficients."""
    if t < 0:
        raise KernelDomainError(f"semigroup needs t >= 0, got {t}")
    return SpectralField(g.grid, g.coeffs * np.exp(-t * g.grid.ksq))


def semigroup_by_convolution(t: float, g: SpectralField) -> np.ndarray:
    """``S(t) g`` on the lattice by direct quadrature against the kernel."""
    grid = g.grid
    f = grid.inverse(g.coeffs)
    x1, x2 = grid.mesh
    x = np.stack([x1, x2], axis=-1)
    kern = kernel_value(t, x)  # G(t, x - 0)
    # periodic discrete convolution
    return np.real(np.fft.ifft2(np.fft.fft2(kern) * np.fft.fft2(f))) * grid.cell_area


# -- scaling exponents --------------------------------------------------------

@dataclass
class ExponentFit:
    beta: float
    theoretical_exponent: float
    fitted_slope: float
    r_squared: float
    sample_times: list = field(default_factory=list)
    integrals: list = field(default_factory=list)

    @property
    def slope_error(self) -> float:
        return abs(self.fitted_slope - self.theoretical_exponent)


def required_points(s: float, cells_per_width: int = 8) -> int:
    """Smallest even lattice size whose spacing puts ``cells_per_width`` cells across sqrt(s)."""
    n = int(math.ceil(cells_per_width * TWO_PI / math.sqrt(s)))
    return n + (n % 2)


def _quadrature_lines(s: float, n: int | None, cells_per_width: int):
    need = required_points(s, cells_per_width)
    if n is None:
        n = need
    elif n < need:
        raise UnderResolvedError(s, n, need)
    h = TWO_PI / n
    # midpoints, displacement measured from x
    y = -np.pi + h * (np.arange(n) + 0.5)
    return y, h


def kernel_power_integral(s: float, betas: Sequence[float], gradient: bool,
                          n: int | None = None, cells_per_width: int = 8) -> np.ndarray:
    """Midpoint-rule values of ``int |grad_y G(s,x,y)|^beta dy`` or ``int G^beta dy``."""
    y, h = _quadrature_lines(s, n, cells_per_width)
    hk = circle_kernel(s, y)
    if gradient:
        dk = circle_kernel(s, y, deriv=True)
        mag2 = np.multiply.outer(dk * dk, hk * hk) + np.multiply.outer(hk * hk, dk * dk)
        base = np.sqrt(mag2)
    else:
        base = np.multiply.outer(hk, hk)
    return np.array([np.sum(base**b) * h * h for b in betas])


def log_grid(lo: float = 1e-3, hi: float = 1e-1, count: int = 12) -> np.ndarray:
    return np.geomspace(lo, hi, count)


def _fit(beta, theory, times, values) -> ExponentFit:
    ls, lv = np.log(times), np.log(values)
    slope, icpt = np.polyfit(ls, lv, 1)
    resid = lv - (slope * ls + icpt)
    ss_tot = np.sum((lv - lv.mean()) ** 2)
    # flat data (e.g. the beta = 1 kernel integral, identically 1) is fitted exactly
    if np.ptp(lv) < 1e-10:
        r2 = 1.0
    else:
        r2 = 1.0 - np.sum(resid**2) / ss_tot
    return ExponentFit(float(beta), float(theory), float(slope), float(min(max(r2, 0.0), 1.0)),
                       [float(t) for t in times], [float(v) for v in values])


def _fit_many(betas, gradient: bool, times, n, cells_per_width) -> list[ExponentFit]:
    times = np.asarray(log_grid() if times is None else times, dtype=float)
    if len(times) < 12:
        raise ValueError("exponent fits use at least 12 sample times")
    vals = np.array([kernel_power_integral(s, betas, gradient, n, cells_per_width) for s in times])
    out = []
    for j, b in enumerate(betas):
        theory = 1.0 - 1.5 * b if gradient else 1.0 - b
        out.append(_fit(b, theory, times, vals[:, j]))
    return out


def fit_gradient_estimates(betas: Sequence[float], times=None, n: int | None = None,
                           cells_per_width: int = 8) -> list[ExponentFit]:
    for b in betas:
        if not 0 < b < 4 / 3:
            raise ValueError(f"gradient estimate needs beta in (0, 4/3), got {b}")
    return _fit_many(list(betas), True, times, n, cells_per_width)


def fit_kernel_estimates(betas: Sequence[float], times=None, n: int | None = None,
                         cells_per_width: int = 8) -> list[ExponentFit]:
    for b in betas:
        if not 0 < b < 2:
            raise ValueError(f"kernel estimate needs beta in (0, 2), got {b}")
    return _fit_many(list(betas), False, times, n, cells_per_width)


def fit_gradient_estimate(beta: float, times=None, n: int | None = None) -> ExponentFit:
    """Log-log slope of ``int |grad_y G(s,x,y)|^beta dy`` against ``s``; expected ``1 - 3 beta/2``."""
    return fit_gradient_estimates([beta], times, n)[0]


def fit_kernel_estimate(beta: float, times=None, n: int | None = None) -> ExponentFit:
    """Log-log slope of ``int G(s,x,y)^beta dy`` against ``s``; expected ``1 - beta``."""
    return fit_kernel_estimates([beta], times, n)[0]


def free_space_gradient_integral(s: float, beta: float) -> float:
    """``int_{R^2} |grad G_free|^beta`` in closed form (torus value for small ``s``)."""
    c = beta / (4.0 * s)
    radial = math.gamma(1.0 + beta / 2.0) / (2.0 * c ** (1.0 + beta / 2.0))
    return TWO_PI * (2.0 * s) ** (-beta) * (4.0 * np.pi * s) ** (-beta) * radial


# -- the operator J ------------------------------------------------------------

def _phi1(lam: np.ndarray, h: float) -> np.ndarray:
    """``(1 - exp(-lam h)) / lam`` with the ``lam -> 0`` limit ``h``."""
    out = np.full_like(lam, h, dtype=float)
    nz = lam > 0
    out[nz] = -np.expm1(-lam[nz] * h) / lam[nz]
    return out


def apply_J_series(grid: TorusGrid, phi: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Coefficients of ``(J phi)(t_k)`` for every grid time.

    ``phi`` has shape ``(K+1, 2, n, n)`` (vector coefficients at each
    ``t_k``). On each step the field is taken constant, equal to the
    average of its endpoint values, and the heat factor is integrated
    exactly in time. The spatial action of ``grad_y G`` is the multiplier
    ``-i eta`` composed with the heat multiplier.
    """
    phi = np.asarray(phi)
    times = np.asarray(times, dtype=float)
    if phi.shape[0] != times.size:
        raise ValueError("phi and times disagree in length")
    out = np.zeros((times.size, grid.n, grid.n), dtype=complex)
    lam = grid.ksq
    acc = np.zeros((grid.n, grid.n), dtype=complex)
    for k in range(times.size - 1):
        h = times[k + 1] - times[k]
        mid = 0.5 * (phi[k] + phi[k + 1])
        div = 1j * grid.k1 * mid[0] + 1j * grid.k2 * mid[1]
        acc = np.exp(-lam * h) * acc - _phi1(lam, h) * div
        out[k + 1] = acc
    return out


def apply_J(phi: Sequence[VelocitySpectral] | np.ndarray, times, t: float, grid: TorusGrid | None = None) -> RealField:
    """``(J phi)(t, .)`` on the lattice, ``t`` being one of ``times``."""
    if grid is None:
        grid = phi[0].grid
    arr = np.stack([v.coeffs for v in phi]) if not isinstance(phi, np.ndarray) else phi
    times = np.asarray(times, dtype=float)
    idx = int(np.argmin(np.abs(times - t)))
    if not math.isclose(times[idx], t, rel_tol=0, abs_tol=1e-12 * max(1.0, abs(t))):
        raise ValueError(f"t={t} is not on the time grid")
    coeffs = apply_J_series(grid, arr, times)
    return RealField(grid, grid.inverse(coeffs[idx]))


def j_bound_ratio(grid: TorusGrid, phi: np.ndarray, times, p: float = 8.0, gamma: float = 4.0) -> float:
    """``sup_{t,x} |J phi| / (int_0^T ||phi(s)||_p^gamma ds)^{1/gamma}``."""
    times = np.asarray(times, dtype=float)
    j = grid.inverse(apply_J_series(grid, phi, times))
    lhs = float(np.max(np.abs(j)))
    v = grid.inverse(np.asarray(phi))
    mag = np.hypot(v[:, 0], v[:, 1])
    norms = lp_norm_samples(grid, mag, p)
    rhs = np.trapezoid(norms**gamma, times) ** (1.0 / gamma)
    return lhs / rhs if rhs > 0 else 0.0
