"""Exponential time integrators for the vorticity equation with and without noise.

All integrators share one step. With ``E = exp(-|eta|^2 dt)`` and the
integrating factor ``phi1 = (1 - E) / |eta|^2``, one step is

    xi' = E xi + phi1 * (Pi_R q-term + sum_j sigma_j v_j) + sqrt(eps) * w * sum_j sigma_j dW_j

``phi1`` integrates the semigroup exactly over a step with frozen forcing.
``w = sqrt((1 - E^2) / (2 |eta|^2 dt))`` makes the per-mode variance of the
frozen-integrand stochastic convolution exact. Noise is evaluated at the
left end point (Ito). The additive case advances the stochastic
convolution ``zeta`` by its exact OU transition and integrates
``beta = xi - zeta``.

Every state lives on the dealiased zero-mean band of the grid.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .biot_savart import transport_coeffs
from .noise import (
    AdditiveNoiseSpec,
    MultiplicativeNoiseSpec,
    RngStream,
    complex_gaussian,
    sigma_samples,
)
from .torus import SpectralField, TorusGrid, hermitian_part, l2_norm_coeffs, lp_norm_samples

log = logging.getLogger(__name__)

Scheme = Literal["euler", "heun"]


class SolverDivergence(FloatingPointError):
    """Non-finite values appeared; ``state`` holds the last finite coefficients."""

    def __init__(self, message: str, state: np.ndarray, step: int, time: float, dump_path: str | None = None):
        super().__init__(message)
        self.state = state
        self.step = step
        self.time = time
        self.dump_path = dump_path


class TruncationSaturatedWarning(UserWarning):
    """The cutoff vanished on more than 10% of the steps."""


# -- configuration types --------------------------------------------------------------

@dataclass(frozen=True)
class TruncationSpec:
    """Smooth cutoff ``Pi_R`` of the L^p norm: 1 below ``R``, 0 above ``R + 1``.

    The transition is the cubic smoothstep, so ``|Pi_R'| <= 1.5``.
    ``truncate_sigma`` controls whether the noise coefficients are cut off
    as well as the quadratic term.
    """

    R: float
    enabled: bool = True
    truncate_sigma: bool = True

    LIPSCHITZ = 1.5

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError(f"truncation radius must be positive, got {self.R}")

    @classmethod
    def default_for(cls, grid: TorusGrid, xi0: np.ndarray, p: float, **kw) -> "TruncationSpec":
        """``R = 10 ||xi0||_{L^p}``, floored at 1 so that zero data stays admissible."""
        norm = float(np.max(lp_norm_samples(grid, grid.inverse(xi0), p)))
        return cls(max(10.0 * norm, 1.0), **kw)

    @classmethod
    def off(cls) -> "TruncationSpec":
        return cls(1.0, enabled=False, truncate_sigma=False)

    def factor(self, r):
        if not self.enabled:
            return np.ones_like(np.asarray(r, dtype=float))
        s = np.clip(np.abs(np.asarray(r, dtype=float)) - self.R, 0.0, 1.0)
        return 1.0 - s * s * (3.0 - 2.0 * s)

    def derivative(self, r):
        if not self.enabled:
            return np.zeros_like(np.asarray(r, dtype=float))
        r = np.asarray(r, dtype=float)
        s = np.clip(np.abs(r) - self.R, 0.0, 1.0)
        return -6.0 * s * (1.0 - s) * np.sign(r)


@dataclass(frozen=True)
class PicardSettings:
    lam: float = 100.0
    tol: float = 1e-10
    max_iter: int = 50

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if not self.tol > 0 or self.max_iter < 1:
            raise ValueError("tol must be positive and max_iter at least 1")


@dataclass(frozen=True)
class SimulationConfig:
    """Horizon, step, noise scale and model switches.

    ``nu`` is fixed to 1. ``nonlinear=False`` drops the transport term,
    which gives the linear problems used by the analytic oracles.
    """

    grid: TorusGrid
    T: float
    dt: float
    epsilon: float = 0.0
    p: float = 4.0
    noise: AdditiveNoiseSpec | MultiplicativeNoiseSpec | None = None
    nonlinear: bool = True
    scheme: Scheme = "euler"
    nu: float = 1.0

    def __post_init__(self):
        if not (self.T > 0 and self.dt > 0 and self.dt <= self.T):
            raise ValueError(f"need 0 < dt <= T, got dt={self.dt}, T={self.T}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.p <= 2:
            raise ValueError(f"p must exceed 2, got {self.p}")
        if self.nu != 1.0:
            raise ValueError("only nu = 1 is supported")
        if self.scheme not in ("euler", "heun"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        k = self.T / self.dt
        if abs(k - round(k)) > 1e-9 * max(1.0, k):
            raise ValueError(f"T={self.T} is not an integer multiple of dt={self.dt}")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def replace(self, **changes) -> "SimulationConfig":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class ControlPath:
    """Piecewise-constant control with ``K`` knots on ``[0, T]``.

    ``values`` has shape ``(K, n)``. Knot ``c`` covers ``[c T/K, (c+1) T/K)``.
    ``M`` is the declared energy bound (``None`` means unbounded).
    """

    values: np.ndarray
    T: float
    M: float | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"control values need shape (K, n), got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def knots(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def knot_dt(self) -> float:
        return self.T / self.knots

    def energy(self) -> float:
        """``1/2 sum_k |v_k|^2 dt_k``."""
        return 0.5 * float(np.sum(self.values**2)) * self.knot_dt

    def projected(self) -> "ControlPath":
        """Rescale onto the admissible ball ``energy <= M``."""
        if self.M is None:
            return self
        e = self.energy()
        if e <= self.M:
            return self
        return ControlPath(self.values * math.sqrt(self.M / e), self.T, self.M)

    @classmethod
    def zero(cls, knots: int, n: int, T: float, M: float | None = None) -> "ControlPath":
        return cls(np.zeros((knots, n)), T, M)

    @classmethod
    def constant(cls, value, knots: int, T: float, M: float | None = None) -> "ControlPath":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(np.tile(value, (knots, 1)), T, M)

    def per_step(self, steps: int) -> np.ndarray:
        """Values on each solver step, shape ``(steps, n)``."""
        if steps % self.knots:
            raise ValueError(f"{steps} solver steps are not a multiple of {self.knots} control knots")
        return np.repeat(self.values, steps // self.knots, axis=0)


@dataclass
class Trajectory:
    """Time grid, stored states and per-time diagnostics.

    ``states`` has shape ``(len(state_index),) + batch + (n, n)``. Diagnostics
    are arrays of shape ``(len(diagnostic_index),) + batch``; by default
    they are recorded at every time.
    """

    grid: TorusGrid
    times: np.ndarray
    diagnostics: dict[str, np.ndarray]
    terminal: np.ndarray
    states: np.ndarray | None = None
    state_index: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    diagnostic_index: np.ndarray | None = None

    def __post_init__(self):
        if self.diagnostic_index is None:
            self.diagnostic_index = np.arange(len(self.times))
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        for name, arr in self.diagnostics.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"diagnostic {name!r} has non-finite entries")

    @property
    def final(self) -> SpectralField:
        return SpectralField(self.grid, self.terminal)

    def state(self, k: int) -> SpectralField:
        if self.states is None:
            raise ValueError("states were not stored for this trajectory")
        k = k % len(self.times)
        pos = np.searchsorted(self.state_index, k)
        if pos >= len(self.state_index) or self.state_index[pos] != k:
            raise KeyError(f"time index {k} was not stored")
        return SpectralField(self.grid, self.states[pos])

    @property
    def truncation_saturated_fraction(self) -> float:
        pi = self.diagnostics.get("pi_R")
        if pi is None:
            return 0.0
        return float(np.mean(pi[:-1] == 0.0)) if len(pi) > 1 else 0.0

    @property
    def diagnostic_times(self) -> np.ndarray:
        return self.times[self.diagnostic_index]


# -- step machinery --------------------------------------------------------------------

class _Propagator:
    """Per-mode multipliers for one step of length ``dt``."""

    def __init__(self, grid: TorusGrid, dt: float):
        self.grid = grid
        self.dt = dt
        lam = grid.ksq
        h = dt
        z = lam * h
        self.E = np.exp(-z)
        with np.errstate(divide="ignore", invalid="ignore"):
            phi1 = np.where(z > 1e-8, -np.expm1(-z) / np.where(lam > 0, lam, 1.0), h * (1 - z / 2))
            phi2 = np.where(
                z > 1e-4,
                (np.exp(-z) - 1 + z) / np.where(lam > 0, lam, 1.0) ** 2 / h,
                h / 2 * (1 - z / 3 + z * z / 12),
            )
            w = np.where(z > 1e-8, np.sqrt(-np.expm1(-2 * z) / (2 * np.where(z > 0, z, 1.0))), 1.0 - z / 2)
        self.phi1 = phi1
        self.phi2 = phi2
        self.w = w


_PROP_CACHE: dict = {}


def _propagator(grid: TorusGrid, dt: float) -> _Propagator:
    key = (grid, float(dt))
    if key not in _PROP_CACHE:
        _PROP_CACHE[key] = _Propagator(grid, dt)
    return _PROP_CACHE[key]


def sigma_forcing(spec: MultiplicativeNoiseSpec, grid: TorusGrid, samples: np.ndarray) -> np.ndarray:
    """Band-projected coefficients of ``sigma_j(xi)``, shape ``batch + (n_ch, N, N)``."""
    return grid.project_band(hermitian_part(grid.forward(sigma_samples(spec, grid, samples))))


class _Model:
    """Evaluates the drift and noise terms for one configuration."""

    def __init__(self, cfg: SimulationConfig, trunc: TruncationSpec | None, sigma_truncated: bool):
        self.cfg = cfg
        self.grid = cfg.grid
        self.prop = _propagator(cfg.grid, cfg.dt)
        self.trunc = trunc if trunc is not None else TruncationSpec.off()
        self.noise = cfg.noise if isinstance(cfg.noise, MultiplicativeNoiseSpec) else None
        self.sigma_truncated = bool(sigma_truncated and self.trunc.enabled)
        self._const_sigma = None
        if self.noise is not None and self.noise.is_state_independent():
            zero = np.zeros((self.grid.n, self.grid.n))
            self._const_sigma = sigma_forcing(self.noise, self.grid, zero)

    @property
    def needs_samples(self) -> bool:
        return self.cfg.nonlinear or self.trunc.enabled or (self.noise is not None and self._const_sigma is None)

    def sigma(self, samples: np.ndarray | None) -> np.ndarray:
        if self._const_sigma is not None:
            return self._const_sigma
        return sigma_forcing(self.noise, self.grid, samples)

    def evaluate(self, xi: np.ndarray, control: np.ndarray | None):
        """Return ``(samples, Pi_R, drift, sigma_eff)`` at state ``xi``.

        ``samples`` and ``Pi_R`` are ``None`` when nothing needs them.
        """
        g = self.grid
        samples = pi = None
        if self.needs_samples:
            samples = g.inverse(xi)
        if self.trunc.enabled:
            pi = self.trunc.factor(lp_norm_samples(g, samples, self.cfg.p))
        drift = 0.0
        if self.cfg.nonlinear:
            drift = transport_coeffs(g, xi, samples)
            if pi is not None:
                drift = pi[..., None, None] * drift
        sig = None
        if self.noise is not None and (control is not None or self.cfg.epsilon > 0):
            sig = self.sigma(samples)
            if self.sigma_truncated:
                sig = pi[..., None, None, None] * sig
            if control is not None:
                drift = drift + _contract(sig, control)
        return samples, pi, drift, sig

    def noise_term(self, sig: np.ndarray | None, dW: np.ndarray | None) -> np.ndarray | float:
        if sig is None or dW is None or self.cfg.epsilon == 0:
            return 0.0
        return (math.sqrt(self.cfg.epsilon) * self.prop.w) * _contract(sig, dW)


def _contract(sig: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """``sum_j coef_j sigma_j`` with batch broadcasting."""
    coef = np.asarray(coef, dtype=float)
    if sig.ndim == 3:
        nch, n, _ = sig.shape
        return (coef @ sig.reshape(nch, n * n)).reshape(coef.shape[:-1] + (n, n))
    out = sig[..., 0, :, :] * coef[..., 0, None, None]
    for j in range(1, sig.shape[-3]):
        out = out + sig[..., j, :, :] * coef[..., j, None, None]
    return out


def _diag_row(grid: TorusGrid, xi: np.ndarray, samples: np.ndarray, p: float):
    return (
        l2_norm_coeffs(xi),
        lp_norm_samples(grid, samples, p),
        np.sqrt(np.sum(grid.ksq * np.abs(xi) ** 2, axis=(-2, -1))),
    )


def _check_finite(xi_new: np.ndarray, xi_old: np.ndarray, k: int, dt: float, dump_dir: str | None):
    if np.all(np.isfinite(xi_new)):
        return
    path = None
    if dump_dir is not None:
        os.makedirs(dump_dir, exist_ok=True)
        path = os.path.join(dump_dir, f"divergence_state_{k:06d}.npy")
        np.save(path, xi_old)
    raise SolverDivergence(f"non-finite state after step {k} (t={(k + 1) * dt:.6g})", xi_old, k, k * dt, path)


def _as_coeffs(grid: TorusGrid, xi0) -> np.ndarray:
    c = xi0.coeffs if isinstance(xi0, SpectralField) else np.asarray(xi0, dtype=complex)
    if c.shape[-2:] != (grid.n, grid.n):
        raise ValueError(f"initial state shape {c.shape} does not match grid n={grid.n}")
    return grid.project_band(c)


class _Recorder:
    """Collects diagnostics every ``stride`` steps (and at the final step)."""

    def __init__(self, grid, steps, batch, store_every, p, reference, stride=1):
        self.grid, self.p = grid, p
        self.steps = steps
        idx = set(range(0, steps + 1, max(1, int(stride)))) | {steps}
        self.diag_index = np.array(sorted(idx), dtype=int)
        self._slot = {int(k): i for i, k in enumerate(self.diag_index)}
        m = len(self.diag_index)
        self.store_every = store_every
        self.l2 = np.empty((m,) + batch)
        self.lp = np.empty_like(self.l2)
        self.grad = np.empty_like(self.l2)
        self.pi = np.ones_like(self.l2)
        self.states, self.index = [], []
        self.reference = reference
        if reference is not None:
            if stride != 1:
                raise ValueError("distance tracking needs diagnostics at every step")
            self.ref_samples = grid.inverse(reference)
            self.dist_lp = np.empty_like(self.l2)
            self.dist_sup = np.empty_like(self.l2)

    def record(self, k, xi, samples=None, pi=None):
        if self.store_every and (k % self.store_every == 0 or k == self.steps):
            self.states.append(xi.copy())
            self.index.append(k)
        i = self._slot.get(k)
        if i is None:
            return
        if samples is None:
            samples = self.grid.inverse(xi)
        self.l2[i], self.lp[i], self.grad[i] = _diag_row(self.grid, xi, samples, self.p)
        if pi is not None:
            self.pi[i] = pi
        if self.reference is not None:
            d = samples - self.ref_samples[k]
            self.dist_lp[i] = lp_norm_samples(self.grid, d, self.p)
            self.dist_sup[i] = np.max(np.abs(d), axis=(-2, -1))

    def finish(self, times, terminal, meta, truncation: bool) -> Trajectory:
        diag = {"l2": self.l2, "lp": self.lp, "grad_l2": self.grad}
        if truncation:
            diag["pi_R"] = self.pi
            diag["truncation_active"] = (self.pi < 1.0).astype(float)
        if self.reference is not None:
            diag["dist_lp"] = self.dist_lp
            diag["dist_sup"] = self.dist_sup
        states = np.stack(self.states) if self.states else None
        idx = np.array(self.index, dtype=int) if self.states else None
        return Trajectory(self.grid, times, diag, terminal, states, idx, meta, self.diag_index)


# -- public integrators -----------------------------------------------------------------

def step_deterministic(xi: SpectralField, dt: float, scheme: Scheme = "euler", nonlinear: bool = True) -> SpectralField:
    """One exponential-integrator step of the noise-free vorticity equation."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    grid = xi.grid
    cfg = SimulationConfig(grid, dt, dt, nonlinear=nonlinear, scheme=scheme)
    model = _Model(cfg, None, False)
    c = _as_coeffs(grid, xi)
    new = _advance(model, c, None, None, None)[0]
    _check_finite(new, c, 0, dt, None)
    return SpectralField(grid, new)


def _advance(model: _Model, xi: np.ndarray, control, dW, forcing_shift):
    """One step; returns ``(xi_new, samples, pi)`` evaluated at the step start.

    ``forcing_shift`` is added to the state before drift evaluation (the
    stochastic convolution in the additive decomposition); a pair
    ``(start, end)`` supplies the end value for the Heun corrector.
    """
    prop = model.prop
    shift0, shift1 = forcing_shift if isinstance(forcing_shift, tuple) else (forcing_shift, forcing_shift)
    samples, pi, drift, sig = model.evaluate(xi if shift0 is None else xi + shift0, control)
    new = prop.E * xi + prop.phi1 * drift + model.noise_term(sig, dW)
    if model.cfg.scheme == "heun":
        _, _, drift2, _ = model.evaluate(new if shift1 is None else new + shift1, control)
        new = new + prop.phi2 * (drift2 - drift)
    return new, samples, pi


def _generator(rng):
    return rng.generator if isinstance(rng, RngStream) else rng


def simulate_deterministic(cfg: SimulationConfig, xi0: SpectralField, store_every: int = 1,
                           diagnostics_every: int = 1, dump_dir: str | None = None) -> Trajectory:
    """Noise-free trajectory (``epsilon`` and ``noise`` are ignored).

    ``store_every=0`` keeps only diagnostics and the terminal state.
    """
    grid = cfg.grid
    model = _Model(cfg.replace(noise=None, epsilon=0.0), None, False)
    xi = _as_coeffs(grid, xi0)
    rec = _Recorder(grid, cfg.steps, xi.shape[:-2], store_every, cfg.p, None, diagnostics_every)
    for k in range(cfg.steps):
        new, samples, _ = _advance(model, xi, None, None, None)
        rec.record(k, xi, samples)
        _check_finite(new, xi, k, cfg.dt, dump_dir)
        xi = new
    rec.record(cfg.steps, xi)
    return rec.finish(cfg.times, xi, {"kind": "deterministic"}, False)


def simulate_additive(cfg: SimulationConfig, xi0: SpectralField, rng: RngStream | np.random.Generator | None,
                      store_every: int = 1, batch: tuple[int, ...] = (), diagnostics_every: int = 1,
                      dump_dir: str | None = None) -> Trajectory:
    """Additive-noise trajectory through ``xi = beta + sqrt(eps) zeta``.

    The stochastic convolution advances by its exact OU transition; ``beta``
    is integrated with the drift evaluated at ``beta + sqrt(eps) zeta``.
    """
    spec = cfg.noise
    if not isinstance(spec, AdditiveNoiseSpec):
        raise TypeError("simulate_additive needs an AdditiveNoiseSpec")
    grid = cfg.grid
    model = _Model(cfg, None, False)
    beta = np.broadcast_to(_as_coeffs(grid, xi0), tuple(batch) + (grid.n, grid.n)).copy()
    zeta = np.zeros_like(beta)
    gen = None if rng is None else _generator(rng)
    scale = math.sqrt(cfg.epsilon) if gen is not None else 0.0
    decay = model.prop.E
    var = spec.transition_variance(grid, cfg.dt)
    rec = _Recorder(grid, cfg.steps, beta.shape[:-2], store_every, cfg.p, None, diagnostics_every)
    for k in range(cfg.steps):
        if scale > 0:
            zeta_new = decay * zeta + scale * complex_gaussian(grid, var, gen, beta.shape[:-2])
        else:
            zeta_new = zeta
        new, samples, _ = _advance(model, beta, None, None, (zeta, zeta_new))
        rec.record(k, beta + zeta, samples)
        _check_finite(new, beta, k, cfg.dt, dump_dir)
        beta, zeta = new, zeta_new
    xi = beta + zeta
    rec.record(cfg.steps, xi)
    return rec.finish(cfg.times, xi, {"kind": "additive"}, False)


def integrate_with_forcing(cfg: SimulationConfig, xi0: SpectralField, zeta_path: np.ndarray) -> np.ndarray:
    """Solve ``d beta = (Delta beta - div q(beta + zeta)) dt`` for a given forcing path.

    ``zeta_path`` holds coefficients at every grid time, shape ``(K + 1, ..., n, n)``.
    Returns the ``beta`` path with the same shape.
    """
    grid = cfg.grid
    model = _Model(cfg.replace(noise=None, epsilon=0.0), None, False)
    zeta_path = grid.project_band(np.asarray(zeta_path, dtype=complex))
    if zeta_path.shape[0] != cfg.steps + 1:
        raise ValueError(f"forcing path needs {cfg.steps + 1} time slices, got {zeta_path.shape[0]}")
    beta = np.broadcast_to(_as_coeffs(grid, xi0), zeta_path.shape[1:]).copy()
    out = np.empty_like(zeta_path)
    out[0] = beta
    for k in range(cfg.steps):
        new = _advance(model, beta, None, None, (zeta_path[k], zeta_path[k + 1]))[0]
        _check_finite(new, beta, k, cfg.dt, None)
        beta = out[k + 1] = new
    return out


def _draw_dW(gen, dt, batch, n):
    return gen.standard_normal(tuple(batch) + (n,)) * math.sqrt(dt)


def simulate_multiplicative(cfg: SimulationConfig, xi0: SpectralField, trunc: TruncationSpec | None = None,
                            v: ControlPath | None = None, rng: RngStream | np.random.Generator | None = None,
                            store_every: int = 1, batch: tuple[int, ...] = (),
                            reference: np.ndarray | None = None, dW: np.ndarray | None = None,
                            diagnostics_every: int = 1, dump_dir: str | None = None) -> Trajectory:
    """Truncated (optionally controlled) multiplicative-noise trajectory.

    Parameters
    ----------
    trunc : TruncationSpec, optional
        ``None`` uses ``R = 10 ||xi0||_{L^p}``. ``TruncationSpec.off()``
        disables the cutoff, as in the controlled and skeleton equations.
    v : ControlPath, optional
        Control entering as ``sum_j sigma_j v_j dt``; projected onto its
        energy ball ``M``.
    rng : RngStream or Generator, optional
        ``None`` runs the skeleton (no noise) regardless of ``epsilon``.
    batch : tuple
        Leading batch shape; each member gets its own Brownian path.
    reference : ndarray, optional
        Coefficient path ``(K + 1, n, n)``; distances to it are logged as
        ``dist_lp`` and ``dist_sup``.
    dW : ndarray, optional
        Pre-drawn increments ``(K,) + batch + (n_ch,)`` overriding ``rng``.
    diagnostics_every : int
        Diagnostic stride; the final time is always recorded.
    """
    spec = cfg.noise
    if not isinstance(spec, MultiplicativeNoiseSpec):
        raise TypeError("simulate_multiplicative needs a MultiplicativeNoiseSpec")
    grid = cfg.grid
    c0 = _as_coeffs(grid, xi0)
    if trunc is None:
        trunc = TruncationSpec.default_for(grid, c0, cfg.p)
    model = _Model(cfg, trunc, trunc.truncate_sigma)
    xi = np.broadcast_to(c0, tuple(batch) + (grid.n, grid.n)).copy()
    bshape = xi.shape[:-2]
    controls = None
    if v is not None:
        if v.n != spec.n:
            raise ValueError(f"control has {v.n} channels, noise has {spec.n}")
        controls = v.projected().per_step(cfg.steps)
    noisy = (rng is not None or dW is not None) and cfg.epsilon > 0
    gen = _generator(rng) if noisy and dW is None else None
    rec = _Recorder(grid, cfg.steps, bshape, store_every, cfg.p, reference, diagnostics_every)
    for k in range(cfg.steps):
        inc = None
        if noisy:
            inc = dW[k] if dW is not None else _draw_dW(gen, cfg.dt, bshape, spec.n)
        ctl = None if controls is None else controls[k]
        new, samples, pi = _advance(model, xi, ctl, inc, None)
        rec.record(k, xi, samples, pi)
        _check_finite(new, xi, k, cfg.dt, dump_dir)
        xi = new
    samples = grid.inverse(xi)
    pi_end = trunc.factor(lp_norm_samples(grid, samples, cfg.p)) if trunc.enabled else None
    rec.record(cfg.steps, xi, samples, pi_end)
    traj = rec.finish(cfg.times, xi, {"kind": "multiplicative", "R": trunc.R if trunc.enabled else None},
                      trunc.enabled)
    frac = traj.truncation_saturated_fraction
    if frac > 0.1:
        warnings.warn(f"truncation saturated (Pi_R = 0) on {frac:.0%} of steps; the path left the R={trunc.R} regime",
                      TruncationSaturatedWarning, stacklevel=2)
    return traj


def draw_increments(cfg: SimulationConfig, rng: RngStream | np.random.Generator, batch: tuple[int, ...] = ()) -> np.ndarray:
    """All Brownian increments of a run, in the order the stepper draws them."""
    gen = _generator(rng)
    n = cfg.noise.n
    return np.stack([_draw_dW(gen, cfg.dt, batch, n) for _ in range(cfg.steps)])


# -- Picard iteration ---------------------------------------------------------------------

@dataclass
class PicardReport:
    iterations: int
    converged: bool
    differences: list[float]
    ratios: list[float]
    lam: float
    certificate: float
    q_lipschitz: float

    @property
    def last_ratio(self) -> float:
        return self.ratios[-1] if self.ratios else 0.0


class PicardDidNotConverge(RuntimeError):
    def __init__(self, report: PicardReport):
        super().__init__(f"Picard iteration stopped after {report.iterations} iterations; "
                         f"last contraction factor {report.last_ratio:.3g}")
        self.report = report


def _weighted_norm(grid, path_samples, times, lam, p):
    norms = lp_norm_samples(grid, path_samples, p)
    norms = norms.reshape(len(times), -1).max(axis=1)
    return float(np.max(np.exp(-lam * times) * norms))


def picard_solve(cfg: SimulationConfig, xi0: SpectralField, trunc: TruncationSpec | None = None,
                 settings: PicardSettings = PicardSettings(), rng: RngStream | np.random.Generator | None = None,
                 v: ControlPath | None = None, dW: np.ndarray | None = None, raise_on_failure: bool = True) -> Trajectory:
    """Whole-path fixed point ``xi = A xi`` of the discrete mild equation.

    Each sweep maps a path ``X`` to ``Y_{k+1} = E Y_k + phi1 D(X_k) + noise(X_k)``
    with ``Y_0 = xi0``, i.e. the Euler scheme with every nonlinear term
    frozen at the previous iterate. Differences are measured in
    ``sup_k exp(-lam t_k) ||.||_{L^p}``; iteration stops once the unweighted
    sup difference is below ``tol``, so the returned path meets ``tol`` at
    every time even for large ``lam``. The report (``meta['picard']``)
    holds the per-sweep contraction ratios and the certificate

        C_q T^{(p-1)/(2p)} sqrt(pi / lam) + (n eps L^2 (1 - exp(-2 lam T)) / (2 lam))^{p/2}

    with ``C_q`` the largest observed Lipschitz quotient of the cut-off
    quadratic term between successive iterates.
    """
    if cfg.scheme != "euler":
        raise ValueError("Picard iteration is implemented for the euler scheme only")
    spec = cfg.noise
    if not isinstance(spec, MultiplicativeNoiseSpec):
        raise TypeError("picard_solve needs a MultiplicativeNoiseSpec")
    grid = cfg.grid
    c0 = _as_coeffs(grid, xi0)
    if trunc is None:
        trunc = TruncationSpec.default_for(grid, c0, cfg.p)
    model = _Model(cfg, trunc, trunc.truncate_sigma)
    K, times = cfg.steps, cfg.times
    noisy = (rng is not None or dW is not None) and cfg.epsilon > 0
    if noisy and dW is None:
        dW = draw_increments(cfg, rng)
    controls = None if v is None else v.projected().per_step(K)
    prop = model.prop

    X = np.broadcast_to(c0, (K + 1,) + c0.shape).copy()
    diffs, ratios = [], []
    q_lip = 0.0
    prev_q = None
    converged = False
    it = 0
    for it in range(1, settings.max_iter + 1):
        Y = np.empty_like(X)
        Y[0] = c0
        qs = np.zeros_like(X[:-1])
        for k in range(K):
            samples, pi, drift, sig = model.evaluate(X[k], None if controls is None else controls[k])
            if cfg.nonlinear:
                q = transport_coeffs(grid, X[k], samples)
                qs[k] = q if pi is None else pi[..., None, None] * q
            noise = model.noise_term(sig, dW[k] if noisy else None)
            Y[k + 1] = prop.E * Y[k] + prop.phi1 * drift + noise
        if not np.all(np.isfinite(Y)):
            raise SolverDivergence("non-finite Picard iterate", X[-1], K, cfg.T)
        diff_samples = grid.inverse(Y - X)
        d = _weighted_norm(grid, diff_samples, times, settings.lam, cfg.p)
        d_plain = _weighted_norm(grid, diff_samples, times, 0.0, cfg.p)
        if prev_q is not None and cfg.nonlinear:
            dx = lp_norm_samples(grid, grid.inverse(X[:-1] - prevX[:-1]), cfg.p)
            dq = lp_norm_samples(grid, grid.inverse(qs - prev_q), cfg.p)
            ok = dx > 1e-14
            if np.any(ok):
                q_lip = max(q_lip, float(np.max(dq[ok] / dx[ok])))
        prev_q, prevX = qs, X
        if diffs and diffs[-1] > 0:
            ratios.append(d / diffs[-1])
        diffs.append(d)
        log.debug("picard iteration %d: difference %.3e", it, d)
        X = Y
        if d_plain < settings.tol:
            converged = True
            break
    lam = settings.lam
    p = cfg.p
    sig_part = (spec.n * cfg.epsilon * spec.L**2 * -math.expm1(-2 * lam * cfg.T) / (2 * lam)) ** (p / 2)
    cert = q_lip * cfg.T ** ((p - 1) / (2 * p)) * math.sqrt(math.pi / lam) + sig_part
    report = PicardReport(it, converged, diffs, ratios, lam, cert, q_lip)
    if not converged and raise_on_failure:
        raise PicardDidNotConverge(report)

    rec = _Recorder(grid, K, c0.shape[:-2], 1, cfg.p, None)
    for k in range(K + 1):
        samples = grid.inverse(X[k])
        pi = trunc.factor(lp_norm_samples(grid, samples, cfg.p)) if trunc.enabled else None
        rec.record(k, X[k], samples, pi)
    return rec.finish(times, X[-1], {"kind": "picard", "picard": report}, trunc.enabled)


# -- energy estimate ----------------------------------------------------------------------

@dataclass
class EnergyReport:
    p: float
    sup_lp_p: float
    dissipation: float

    def as_dict(self) -> dict:
        return {"p": self.p, "sup_lp_p": self.sup_lp_p, "dissipation": self.dissipation}


def energy_report(traj: Trajectory, p: float) -> EnergyReport:
    """``sup_t ||xi||_p^p`` and ``int_0^T || |xi|^{(p-2)/2} grad xi ||_2^2 dt``.

    The time integral uses Simpson's rule over the stored states, which must
    be stored at every step. Batched trajectories return ensemble means.
    """
    from scipy.integrate import simpson

    if p < 2:
        raise ValueError(f"p must be >= 2, got {p}")
    if traj.states is None or len(traj.state_index) != len(traj.times):
        raise ValueError("energy_report needs states stored at every time step")
    grid = traj.grid
    states = traj.states
    samples = grid.inverse(states)
    d1 = grid.inverse(np.where(grid.resolvable, 1j * grid.k1 * states, 0.0))
    d2 = grid.inverse(np.where(grid.resolvable, 1j * grid.k2 * states, 0.0))
    weight = np.abs(samples) ** (p - 2)
    dens = np.sum(weight * (d1 * d1 + d2 * d2), axis=(-2, -1)) * grid.cell_area
    lp = lp_norm_samples(grid, samples, p) ** p
    dissipation = simpson(dens, x=traj.times, axis=0)
    return EnergyReport(float(p), float(np.mean(lp.max(axis=0))), float(np.mean(dissipation)))


# -- persistence -----------------------------------------------------------------------------

DIAGNOSTIC_COLUMNS = ("l2", "lp", "grad_l2", "truncation_active", "pi_R")


def fmt(x: float) -> str:
    """Locale-free round-trip float formatting used in every CSV."""
    return repr(float(x))


def write_diagnostics_csv(traj: Trajectory, path: str, member: int | None = None) -> None:
    cols = [c for c in DIAGNOSTIC_COLUMNS if c in traj.diagnostics]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "time"] + cols)
        for i, (k, t) in enumerate(zip(traj.diagnostic_index, traj.diagnostic_times)):
            row = []
            for c in cols:
                val = traj.diagnostics[c][i]
                if member is not None:
                    val = np.asarray(val).reshape(-1)[member]
                row.append(fmt(val))
            w.writerow([int(k), fmt(t)] + row)


def dump_states(traj: Trajectory, directory: str, run_id: str) -> list[str]:
    """Write each stored state as ``<run_id>_<index>.npy``; returns the paths."""
    if traj.states is None:
        return []
    os.makedirs(directory, exist_ok=True)
    out = []
    for k, state in zip(traj.state_index, traj.states):
        path = os.path.join(directory, f"{run_id}_{int(k):06d}.npy")
        np.save(path, state)
        out.append(path)
    return out


def load_state(grid: TorusGrid, path: str) -> SpectralField:
    return SpectralField(grid, np.load(path))
