"""Rate functions, rare-event Monte Carlo and uniformity probes for the small-noise limit.

The rate of a terminal state ``psi`` is the least control energy
``1/2 int |v|^2 dt`` steering the skeleton equation (noise replaced by
``sum_j sigma_j v_j``) from ``xi0`` to ``psi``. Here it is approximated by
a penalised terminal-matching problem over piecewise-constant controls,
solved with L-BFGS-B under a penalty continuation.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy import optimize, stats

from .biot_savart import transport_coeffs, velocity_coeffs
from .noise import AdditiveNoiseSpec, MultiplicativeNoiseSpec, RngStream
from .solver import (
    ControlPath,
    SimulationConfig,
    Trajectory,
    TruncationSpec,
    _Model,
    _as_coeffs,
    integrate_with_forcing,
    simulate_additive,
    simulate_multiplicative,
)
from .torus import SpectralField, TorusGrid, l2_norm_coeffs, lp_norm_samples, random_band_field

log = logging.getLogger(__name__)

__all__ = [
    "ControlPath",
    "Event",
    "LipschitzProbe",
    "MCEstimate",
    "RateResult",
    "UniformProbe",
    "lipschitz_probe",
    "mc_estimate",
    "rate_function",
    "skeleton_terminal",
    "uniform_convergence_probe",
]


# -- skeleton and its adjoint ----------------------------------------------------------------

def _skeleton_cfg(cfg: SimulationConfig) -> SimulationConfig:
    if not isinstance(cfg.noise, MultiplicativeNoiseSpec):
        raise TypeError("the skeleton equation needs a MultiplicativeNoiseSpec")
    return cfg.replace(epsilon=0.0)


def skeleton_terminal(cfg: SimulationConfig, xi0: SpectralField, v: ControlPath) -> np.ndarray:
    """Terminal coefficients of the untruncated skeleton driven by ``v``."""
    traj = simulate_multiplicative(_skeleton_cfg(cfg), xi0, TruncationSpec.off(), v=v, rng=None,
                                   store_every=0, diagnostics_every=cfg.steps)
    return traj.terminal


class _Skeleton:
    """Forward map ``v -> xi_v(T)`` and its discrete adjoint (Euler scheme)."""

    def __init__(self, cfg: SimulationConfig, xi0: np.ndarray, knots: int):
        self.cfg = _skeleton_cfg(cfg)
        self.grid = cfg.grid
        self.model = _Model(self.cfg, TruncationSpec.off(), False)
        self.xi0 = xi0
        self.knots = knots
        if cfg.steps % knots:
            raise ValueError(f"{cfg.steps} solver steps are not a multiple of {knots} control knots")
        self.block = cfg.steps // knots
        self.n = cfg.noise.n

    def controls(self, u: np.ndarray) -> np.ndarray:
        return np.repeat(u.reshape(self.knots, self.n), self.block, axis=0)

    def forward(self, u: np.ndarray, keep: bool = False):
        from .solver import _advance

        ctl = self.controls(u)
        xi = self.xi0.copy()
        states = [xi] if keep else None
        for k in range(self.cfg.steps):
            xi = _advance(self.model, xi, ctl[k], None, None)[0]
            if keep:
                states.append(xi)
        if not np.all(np.isfinite(xi)):
            raise FloatingPointError("skeleton diverged during optimisation")
        return xi, states

    def adjoint(self, u: np.ndarray, states: list[np.ndarray], lam_T: np.ndarray) -> np.ndarray:
        """Gradient of ``Re <lam_T, xi_K>`` with respect to the knot values."""
        if self.cfg.scheme != "euler":
            raise ValueError("adjoint gradients are implemented for the euler scheme only")
        g = self.grid
        prop = self.model.prop
        spec = self.cfg.noise
        fam = spec.sigma_family
        prof = spec.profiles(g)
        ctl = self.controls(u)
        grad = np.zeros((self.cfg.steps, self.n))
        lam = lam_T
        for k in range(self.cfg.steps - 1, -1, -1):
            xi = states[k]
            x = g.inverse(xi)
            nu = prop.phi1 * lam
            sig = self.model.sigma(x)
            grad[k] = np.real(np.sum(np.conj(nu) * sig, axis=(-2, -1)))
            back = prop.E * lam
            nu_s = g.inverse(g.project_band(nu))
            if fam.name != "constant":
                dfx = fam.deriv(x)
                acc = np.zeros_like(x)
                for j in range(self.n):
                    acc += ctl[k, j] * prof[j] * dfx
                back = back + g.forward(acc * nu_s)
            if self.cfg.nonlinear:
                back = back + _transport_adjoint(g, xi, x, nu)
            lam = g.project_band(back)
        return grad.reshape(self.knots, self.block, self.n).sum(axis=1).ravel()


def _transport_adjoint(g: TorusGrid, xi: np.ndarray, x: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Adjoint of the linearised transport term ``-div q`` at ``xi`` applied to ``nu``."""
    u = g.inverse(velocity_coeffs(g, xi))
    w1 = g.inverse(g.dealias(1j * g.k1 * nu))
    w2 = g.inverse(g.dealias(1j * g.k2 * nu))
    out = g.forward(u[0] * w1 + u[1] * w2)
    out = out + (-1j * g.k2 * g.inv_ksq) * g.forward(x * w1)
    out = out + (1j * g.k1 * g.inv_ksq) * g.forward(x * w2)
    return out


# -- rate function -----------------------------------------------------------------------------

@dataclass
class RateResult:
    """Outcome of one rate-function evaluation."""

    target: SpectralField
    optimal_control: ControlPath
    cost: float
    terminal_residual: float
    iterations: int
    converged: bool
    success: bool
    objective: float
    penalty: float
    match_tolerance: float
    gradient: str
    starts: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.cost < 0:
            raise ValueError("rate cost must be non-negative")

    def to_dict(self) -> dict:
        return {
            "cost": self.cost,
            "terminal_residual": self.terminal_residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "success": self.success,
            "objective": self.objective,
            "penalty": self.penalty,
            "match_tolerance": self.match_tolerance,
            "gradient": self.gradient,
            "control": {
                "T": self.optimal_control.T,
                "knots": self.optimal_control.knots,
                "channels": self.optimal_control.n,
                "values": self.optimal_control.values.tolist(),
            },
            "starts": self.starts,
        }


class _Stalled(Exception):
    pass


def _minimise(fun, x0, maxiter: int, stall: int):
    """L-BFGS-B with a stall rule: ``stall`` non-improving iterations stop the run."""
    best = {"f": math.inf, "x": np.array(x0, dtype=float), "since": 0, "nit": 0, "stalled": False}

    def cb(intermediate_result):
        f = float(intermediate_result.fun)
        best["nit"] += 1
        if f < best["f"] * (1 - 1e-15) - 1e-300:
            best.update(f=f, x=np.array(intermediate_result.x), since=0)
        else:
            best["since"] += 1
            if best["since"] >= stall:
                best["stalled"] = True
                raise StopIteration

    res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B", callback=cb,
                            options={"maxiter": maxiter, "ftol": 1e-15, "gtol": 1e-11, "maxcor": 30})
    x = res.x
    f = float(res.fun)
    if best["f"] < f:
        x, f = best["x"], best["f"]
    converged = (not best["stalled"]) and res.nit < maxiter
    return x, f, int(res.nit), converged


def rate_function(xi0: SpectralField, target: SpectralField, cfg: SimulationConfig, penalty: float = 10.0,
                  knots: int | None = None, gradient: Literal["adjoint", "fd"] = "adjoint",
                  stages: int = 3, restarts: int = 3, seed: int = 0, max_iter: int = 500,
                  match_rtol: float = 0.02, match_atol: float = 1e-9, stall: int = 20,
                  init_scale: float = 1.0, fd_step: float = 1e-5) -> RateResult:
    """Least control energy steering the skeleton from ``xi0`` to ``target`` at time ``cfg.T``.

    Minimises ``J(v) = 1/2 sum_k |v_k|^2 dt_k + penalty ||xi_v(T) - target||_{L^2}^2``
    over piecewise-constant ``v`` with ``knots`` pieces, multiplying the
    penalty by 10 after each of ``stages`` stages (warm-started). The zero
    control and ``restarts`` random controls (seeded by ``seed``) are tried;
    the lowest final objective wins.

    ``success`` means the optimiser converged and the residual
    ``||xi_v(T) - target||_{L^2}`` is at most
    ``match_rtol * ||target - xi_0(T)||_{L^2} + match_atol``, where
    ``xi_0(T)`` is the uncontrolled endpoint.
    """
    spec = cfg.noise
    if not isinstance(spec, MultiplicativeNoiseSpec):
        raise TypeError("rate_function needs a MultiplicativeNoiseSpec")
    grid = cfg.grid
    tgt = target.coeffs
    if abs(tgt[0, 0]) > 1e-12 * max(1.0, float(np.max(np.abs(tgt)))):
        raise ValueError("target must have zero mean")
    tgt = grid.project_band(tgt)
    if not penalty > 0:
        raise ValueError("penalty must be positive")
    knots = cfg.steps if knots is None else int(knots)
    sk = _Skeleton(cfg, _as_coeffs(grid, xi0), knots)
    dtc = cfg.T / knots
    n = spec.n

    def objective(u, P):
        if gradient == "adjoint":
            xiT, states = sk.forward(u, keep=True)
            r = xiT - tgt
            f = 0.5 * dtc * float(u @ u) + P * float(np.sum(np.abs(r) ** 2))
            g = dtc * u + sk.adjoint(u, states, 2.0 * P * r)
            return f, g
        xiT, _ = sk.forward(u)
        f = 0.5 * dtc * float(u @ u) + P * float(np.sum(np.abs(xiT - tgt) ** 2))
        g = np.empty_like(u)
        for i in range(u.size):
            up, um = u.copy(), u.copy()
            up[i] += fd_step
            um[i] -= fd_step
            fp = 0.5 * dtc * float(up @ up) + P * float(np.sum(np.abs(sk.forward(up)[0] - tgt) ** 2))
            fm = 0.5 * dtc * float(um @ um) + P * float(np.sum(np.abs(sk.forward(um)[0] - tgt) ** 2))
            g[i] = (fp - fm) / (2 * fd_step)
        return f, g

    if gradient not in ("adjoint", "fd"):
        raise ValueError(f"unknown gradient mode {gradient!r}")

    starts = [np.zeros(knots * n)]
    for i in range(restarts):
        gen = RngStream(seed, i, "rate-init").generator
        starts.append(gen.standard_normal(knots * n) * init_scale)

    best = None
    records = []
    for si, u0 in enumerate(starts):
        u = u0
        P = penalty
        total_it = 0
        conv = True
        f = math.inf
        for stage in range(stages):
            P = penalty * 10.0**stage
            u, f, nit, ok = _minimise(lambda w, P=P: objective(w, P), u, max_iter, stall)
            total_it += nit
            conv = ok
        records.append({"start": si, "objective": f, "iterations": total_it, "converged": conv})
        if best is None or f < best[1]:
            best = (u, f, total_it, conv, P)

    u, f, total_it, conv, P = best
    control = ControlPath(u.reshape(knots, n), cfg.T)
    # residual from the public skeleton solver so that replay is bit-identical
    xiT = skeleton_terminal(cfg, xi0, control)
    residual = float(l2_norm_coeffs(xiT - tgt))
    free = skeleton_terminal(cfg, xi0, ControlPath.zero(knots, n, cfg.T))
    tol = match_rtol * float(l2_norm_coeffs(tgt - free)) + match_atol
    return RateResult(
        target=SpectralField(grid, tgt),
        optimal_control=control,
        cost=control.energy(),
        terminal_residual=residual,
        iterations=total_it,
        converged=conv,
        success=bool(conv and residual <= tol),
        objective=f,
        penalty=P,
        match_tolerance=tol,
        gradient=gradient,
        starts=records,
    )


# -- events and Monte Carlo ------------------------------------------------------------------------

EventKind = Literal["always", "terminal_l2_exceeds", "sup_lp_exceeds", "terminal_mode_amplitude_exceeds"]


@dataclass(frozen=True)
class Event:
    """Predicate on logged diagnostics or the terminal state.

    ``terminal_mode_amplitude_exceeds`` compares the amplitude ``A`` of
    ``A cos(eta.x)`` (``component="cos"``) or of ``A sin(eta.x)`` in the
    terminal state with ``threshold``.
    """

    kind: EventKind = "always"
    threshold: float = 0.0
    mode: tuple[int, int] = (1, 0)
    component: Literal["cos", "sin"] = "cos"

    def __post_init__(self):
        if self.kind not in ("always", "terminal_l2_exceeds", "sup_lp_exceeds", "terminal_mode_amplitude_exceeds"):
            raise ValueError(f"unknown event kind {self.kind!r}")

    @property
    def needs_path(self) -> bool:
        return self.kind == "sup_lp_exceeds"

    def describe(self) -> str:
        if self.kind == "always":
            return "always"
        if self.kind == "terminal_mode_amplitude_exceeds":
            return f"{self.component} amplitude of mode {tuple(self.mode)} at T > {self.threshold}"
        return f"{self.kind} {self.threshold}"

    def __call__(self, traj: Trajectory) -> np.ndarray:
        shape = traj.terminal.shape[:-2]
        if self.kind == "always":
            return np.ones(shape, dtype=bool)
        if self.kind == "terminal_l2_exceeds":
            return np.asarray(traj.diagnostics["l2"][-1] > self.threshold)
        if self.kind == "sup_lp_exceeds":
            return np.asarray(traj.diagnostics["lp"].max(axis=0) > self.threshold)
        i, j = traj.grid.index_of(self.mode)
        c = traj.terminal[..., i, j]
        amp = c.real / np.pi if self.component == "cos" else -c.imag / np.pi
        return np.asarray(amp > self.threshold)


@dataclass
class MCEstimate:
    epsilons: list[float]
    event: str
    samples: list[int]
    hits: list[int]
    probabilities: list[float]
    intervals: list[tuple[float, float]]
    slope: float
    intercept: float
    fitted_epsilons: list[float]

    def __post_init__(self):
        for p in self.probabilities:
            if not 0.0 <= p <= 1.0:
                raise ValueError("probability outside [0, 1]")

    @property
    def eps_log_p(self) -> list[float]:
        return [e * math.log(p) if p > 0 else -math.inf for e, p in zip(self.epsilons, self.probabilities)]

    def rows(self) -> list[dict]:
        return [
            {"epsilon": e, "samples": n, "hits": h, "p_hat": p, "wilson_low": lo, "wilson_high": hi, "eps_log_p": el}
            for e, n, h, p, (lo, hi), el in zip(self.epsilons, self.samples, self.hits, self.probabilities,
                                                 self.intervals, self.eps_log_p)
        ]


def wilson_interval(hits: int, n: int, level: float = 0.95) -> tuple[float, float]:
    ci = stats.binomtest(int(hits), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def _chunks(total: int, size: int) -> list[int]:
    out = [size] * (total // size)
    if total % size:
        out.append(total % size)
    return out


def _simulate_chunk(cfg, xi0, trunc, stream: RngStream, size: int, need_path: bool) -> Trajectory:
    stride = 1 if need_path else cfg.steps
    if isinstance(cfg.noise, AdditiveNoiseSpec):
        return simulate_additive(cfg, xi0, stream, store_every=0, batch=(size,), diagnostics_every=stride)
    return simulate_multiplicative(cfg, xi0, trunc, rng=stream, store_every=0, batch=(size,),
                                   diagnostics_every=stride)


def count_hits(event: Event, cfg: SimulationConfig, xi0: SpectralField, samples: int, seed: int,
               tag: str, trunc: TruncationSpec | None = None, chunk: int = 25_000, threads: int = 1) -> int:
    """Number of ``event`` hits in ``samples`` trajectories.

    Chunk ``c`` draws from ``RngStream(seed, c, tag)`` so the count does not
    depend on ``threads``.
    """
    trunc = TruncationSpec.off() if trunc is None else trunc
    sizes = _chunks(samples, chunk)

    def work(c):
        traj = _simulate_chunk(cfg, xi0, trunc, RngStream(seed, c, tag), sizes[c], event.needs_path)
        return int(np.count_nonzero(event(traj)))

    if threads == 1 or len(sizes) == 1:
        counts = [work(c) for c in range(len(sizes))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            counts = list(ex.map(work, range(len(sizes))))
    return int(sum(counts))


def mc_estimate(event: Event, epsilons: Sequence[float], samples: int, cfg: SimulationConfig,
                xi0: SpectralField, seed: int = 0, trunc: TruncationSpec | None = None,
                chunk: int = 25_000, threads: int = 1) -> MCEstimate:
    """Hit frequencies, Wilson 95% intervals and the ``eps log P`` trend.

    Runs ``samples`` independent trajectories per ``epsilon`` (untruncated
    unless ``trunc`` is given). ``eps log P_hat`` is regressed linearly on
    ``epsilon``; the intercept is the empirical rate. Levels with zero hits
    are left out of the fit.
    """
    if samples < 1:
        raise ValueError("samples must be positive")
    eps = [float(e) for e in epsilons]
    hits, probs, ints = [], [], []
    for i, e in enumerate(eps):
        h = count_hits(event, cfg.replace(epsilon=e), xi0, samples, seed, f"mc-eps-{i}", trunc, chunk, threads)
        hits.append(h)
        probs.append(h / samples)
        ints.append(wilson_interval(h, samples))
        log.info("epsilon=%g: %d/%d hits", e, h, samples)
    fit_e = [e for e, p in zip(eps, probs) if p > 0]
    fit_y = [e * math.log(p) for e, p in zip(eps, probs) if p > 0]
    if len(fit_e) >= 2:
        slope, intercept = np.polyfit(fit_e, fit_y, 1)
    elif len(fit_e) == 1:
        slope, intercept = math.nan, fit_y[0]
    else:
        slope = intercept = math.nan
    return MCEstimate(eps, event.describe(), [samples] * len(eps), hits, probs, ints,
                      float(slope), float(intercept), fit_e)


# -- Lipschitz probe ----------------------------------------------------------------------------------

@dataclass
class LipschitzProbe:
    R1: float
    R2: float
    pairs: int
    ratios_lp: np.ndarray
    ratios_sup: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.ratios_lp)) and np.all(np.isfinite(self.ratios_sup))):
            raise ValueError("non-finite difference quotient")

    @property
    def max_ratio_lp(self) -> float:
        return float(np.max(self.ratios_lp))

    @property
    def max_ratio_sup(self) -> float:
        return float(np.max(self.ratios_sup))

    @property
    def median_ratio_lp(self) -> float:
        return float(np.median(self.ratios_lp))

    @property
    def median_ratio_sup(self) -> float:
        return float(np.median(self.ratios_sup))

    def summary(self) -> dict:
        return {"R1": self.R1, "R2": self.R2, "pairs": self.pairs,
                "max_ratio_lp": self.max_ratio_lp, "median_ratio_lp": self.median_ratio_lp,
                "max_ratio_sup": self.max_ratio_sup, "median_ratio_sup": self.median_ratio_sup}


def _scaled_field(grid, gen, radius, p, size, slope=2.0):
    c = random_band_field(grid, gen, slope=slope, size=size)
    norms = lp_norm_samples(grid, grid.inverse(c), p)
    frac = gen.uniform(0.5, 1.0, size=size)
    return c * (radius * frac / norms)[..., None, None]


def _forcing_paths(grid, gen, times, radius, p, count):
    """Smooth random paths ``sum_m sin(m pi t / T + phase_m) F_m`` scaled into the ``radius`` ball."""
    T = times[-1]
    fields = random_band_field(grid, gen, slope=2.0, size=(3, count))
    phase = gen.uniform(0, 2 * np.pi, size=(3, count))
    m = np.arange(1, 4)[:, None, None]
    w = np.sin(m * np.pi * times[None, :, None] / T + phase[:, None, :])
    path = np.einsum("mtb,mbij->tbij", w, fields)
    sup = lp_norm_samples(grid, grid.inverse(path), p).max(axis=0)
    frac = gen.uniform(0.5, 1.0, size=count)
    return path * (radius * frac / sup)[None, :, None, None]


def lipschitz_probe(R1: float, R2: float, pairs: int, cfg: SimulationConfig, seed: int = 0) -> LipschitzProbe:
    """Difference quotients of the forcing-to-solution map of the shifted equation.

    For random smooth forcing pairs in the ``C([0,T]; L^p)`` ball of radius
    ``R2`` (and a shared initial vorticity with ``||xi0||_{L^p} <= R1``)
    this integrates ``d beta = (Delta beta - div q(beta + zeta)) dt`` and
    reports ``||beta_1 - beta_2|| / ||zeta_1 - zeta_2||`` in
    ``C([0,T]; L^p)`` and in the space-time sup norm. Pairs closer than
    ``1e-6`` are redrawn.
    """
    if not isinstance(cfg.noise, AdditiveNoiseSpec):
        raise TypeError("lipschitz_probe needs an additive configuration")
    grid, p = cfg.grid, cfg.p
    gen = RngStream(seed, 0, "lipschitz").generator
    times = cfg.times
    xi0 = _scaled_field(grid, gen, R1, p, (pairs,))
    z1 = _forcing_paths(grid, gen, times, R2, p, pairs)
    z2 = _forcing_paths(grid, gen, times, R2, p, pairs)
    den_lp = lp_norm_samples(grid, grid.inverse(z1 - z2), p).max(axis=0)
    bad = den_lp < 1e-6
    while np.any(bad):
        z2[:, bad] = _forcing_paths(grid, gen, times, R2, p, int(bad.sum()))
        den_lp = lp_norm_samples(grid, grid.inverse(z1 - z2), p).max(axis=0)
        bad = den_lp < 1e-6
    zeta = np.concatenate([z1, z2], axis=1)
    x0 = np.concatenate([xi0, xi0], axis=0)
    beta = integrate_with_forcing(cfg, x0, zeta)
    d_beta = grid.inverse(beta[:, :pairs] - beta[:, pairs:])
    d_zeta = grid.inverse(z1 - z2)
    num_lp = lp_norm_samples(grid, d_beta, p).max(axis=0)
    num_sup = np.abs(d_beta).max(axis=(0, 2, 3))
    den_sup = np.abs(d_zeta).max(axis=(0, 2, 3))
    return LipschitzProbe(R1, R2, pairs, num_lp / den_lp, num_sup / den_sup)


# -- uniform convergence probe -------------------------------------------------------------------------

@dataclass
class UniformProbe:
    """Exceedance frequencies ``P(||xi^eps_v - xi^0_v|| > delta)`` per cell, level and norm."""

    epsilons: list[float]
    deltas: list[float]
    samples: int
    rows: list[dict]
    max_over_grid: dict
    monotone: dict
    variance_comparison: list[dict]
    limitations: str = ("initial conditions and controls form a finite grid; uniformity over "
                        "norm-bounded non-compact sets is not sampled")

    @property
    def all_monotone(self) -> bool:
        return all(self.monotone.values())


def uniform_convergence_probe(cfg: SimulationConfig, xi0_set: Sequence[SpectralField],
                              controls: Sequence[ControlPath], epsilons: Sequence[float],
                              samples: int = 200, deltas: Sequence[float] = (0.1, 0.05),
                              seed: int = 0) -> UniformProbe:
    """Paired controlled/skeleton runs on a grid of initial data and controls.

    Every ``(xi0, v)`` cell uses the same Brownian stream for all
    ``epsilon`` (common random numbers). Distances are
    ``sup_t ||xi^eps(t) - xi^0(t)||_{L^p}`` (``"lp"``) and the space-time
    sup norm (``"sup"``). ``monotone[(norm, delta)]`` records whether the
    maximum over cells is nonincreasing as ``epsilon`` decreases.
    """
    if not isinstance(cfg.noise, MultiplicativeNoiseSpec):
        raise TypeError("uniform_convergence_probe needs a MultiplicativeNoiseSpec")
    eps = sorted((float(e) for e in epsilons), reverse=True)
    deltas = [float(d) for d in deltas]
    off = TruncationSpec.off()
    rows = []
    indicators = {}
    for i, x0 in enumerate(xi0_set):
        for j, v in enumerate(controls):
            ref = simulate_multiplicative(cfg.replace(epsilon=0.0), x0, off, v=v, rng=None).states
            cell = i * len(controls) + j
            for e in eps:
                if e == 0.0:
                    d_lp = d_sup = np.zeros(samples)
                else:
                    tr = simulate_multiplicative(cfg.replace(epsilon=e), x0, off, v=v,
                                                 rng=RngStream(seed, cell, "uniform"), store_every=0,
                                                 batch=(samples,), reference=ref)
                    d_lp = tr.diagnostics["dist_lp"].max(axis=0)
                    d_sup = tr.diagnostics["dist_sup"].max(axis=0)
                for norm, d in (("lp", d_lp), ("sup", d_sup)):
                    for delta in deltas:
                        hit = d > delta
                        indicators[(i, j, e, norm, delta)] = hit
                        rows.append({"xi0": i, "control": j, "epsilon": e, "norm": norm, "delta": delta,
                                     "p_hat": float(np.mean(hit)), "mean_distance": float(np.mean(d))})
    max_over, monotone = {}, {}
    for norm in ("lp", "sup"):
        for delta in deltas:
            vals = [max(r["p_hat"] for r in rows if r["epsilon"] == e and r["norm"] == norm and r["delta"] == delta)
                    for e in eps]
            max_over[f"{norm}:{delta}"] = dict(zip(eps, vals))
            monotone[f"{norm}:{delta}"] = bool(all(b <= a for a, b in zip(vals, vals[1:])))
    var_rows = []
    for i in range(len(xi0_set)):
        for j in range(len(controls)):
            for norm in ("lp", "sup"):
                for delta in deltas:
                    for a, b in zip(eps, eps[1:]):
                        ha = indicators[(i, j, a, norm, delta)].astype(float)
                        hb = indicators[(i, j, b, norm, delta)].astype(float)
                        pa, pb = ha.mean(), hb.mean()
                        var_rows.append({
                            "xi0": i, "control": j, "norm": norm, "delta": delta, "eps_a": a, "eps_b": b,
                            "var_shared": float(np.var(ha - hb) / samples),
                            "var_independent": float((pa * (1 - pa) + pb * (1 - pb)) / samples),
                        })
    return UniformProbe(eps, deltas, samples, rows, max_over, monotone, var_rows)
