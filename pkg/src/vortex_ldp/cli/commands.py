"""Subcommand implementations. Each returns ``(outputs, ok)`` after writing into the run directory."""

from __future__ import annotations

import csv
import json
import logging
import os
from typing import Callable

import numpy as np

from .. import biot_savart as bs
from .. import heat_kernel as hk
from ..ldp import Event, lipschitz_probe, mc_estimate, rate_function, uniform_convergence_probe
from ..noise import AdditiveNoiseSpec, MultiplicativeNoiseSpec, RngStream
from ..solver import (
    SolverDivergence,
    energy_report,
    fmt,
    picard_solve,
    simulate_additive,
    simulate_deterministic,
    simulate_multiplicative,
)
from ..torus import TorusGrid, lp_norm_samples, random_band_field
from .config import RunConfig, canonical_json

log = logging.getLogger(__name__)


class InvariantFailure(Exception):
    """An invariant check failed; outputs were still written."""


def write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        fh.write(canonical_json(obj))


def write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(x) if isinstance(x, (float, np.floating)) else x for x in r])


# -- simulate -----------------------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, run_dir: str, threads: int) -> tuple[list[str], bool]:
    sim = cfg.simulation_config()
    grid = sim.grid
    xi0 = cfg.initial.build(grid, sim.p)
    block = cfg.simulate
    outputs, ok = [], True
    rows, summaries = [], []
    norm0 = float(lp_norm_samples(grid, grid.inverse(xi0.coeffs), sim.p))
    for m in range(block.ensemble):
        stream = RngStream(cfg.seed, m, "simulate")
        try:
            if sim.noise is None:
                traj = simulate_deterministic(sim, xi0)
            elif isinstance(sim.noise, AdditiveNoiseSpec):
                traj = simulate_additive(sim, xi0, stream)
            else:
                trunc = cfg.truncation.build(grid, xi0, sim.p)
                if block.method == "picard":
                    traj = picard_solve(sim, xi0, trunc, cfg.picard.build(), rng=stream, raise_on_failure=False)
                else:
                    traj = simulate_multiplicative(sim, xi0, trunc, rng=stream)
        except SolverDivergence as exc:
            path = os.path.join(run_dir, f"divergence_member{m:04d}_step{exc.step:06d}.npy")
            np.save(path, exc.state)
            outputs.append(path)
            raise InvariantFailure(f"member {m}: {exc}") from exc
        cols = [c for c in ("l2", "lp", "grad_l2", "truncation_active", "pi_R") if c in traj.diagnostics]
        for i, (k, t) in enumerate(zip(traj.diagnostic_index, traj.diagnostic_times)):
            rows.append([m, int(k), float(t)] + [float(traj.diagnostics[c][i]) for c in cols])
        if block.store_every:
            stride_states = traj.states[:: block.store_every]
            sel = traj.state_index[:: block.store_every]
            for k, st in zip(sel, stride_states):
                path = os.path.join(run_dir, "states", f"m{m:04d}_{int(k):06d}.npy")
                os.makedirs(os.path.dirname(path), exist_ok=True)
                np.save(path, st)
                outputs.append(path)
        rep = energy_report(traj, sim.p)
        info = {"member": m, "energy": rep.as_dict(),
                "empirical_constant": rep.sup_lp_p / (1.0 + norm0**sim.p)}
        if traj.meta.get("picard") is not None:
            pr = traj.meta["picard"]
            info["picard"] = {"iterations": pr.iterations, "converged": pr.converged, "ratios": pr.ratios,
                              "differences": pr.differences, "certificate": pr.certificate, "lambda": pr.lam}
            ok &= pr.converged
        if "truncation_active" in traj.diagnostics:
            info["truncation_active_steps"] = int(np.sum(traj.diagnostics["truncation_active"][:-1]))
            info["truncation_saturated_fraction"] = traj.truncation_saturated_fraction
        mean_ok = bool(np.all(traj.terminal[..., 0, 0] == 0))
        info["mean_zero"] = mean_ok
        ok &= mean_ok
        if sim.noise is None or sim.epsilon == 0:
            l2 = traj.diagnostics["l2"]
            mono = bool(np.all(np.diff(l2) <= 1e-12 * max(1.0, float(l2[0]))))
            info["l2_nonincreasing"] = mono
            ok &= mono
        summaries.append(info)
    path = os.path.join(run_dir, "diagnostics.csv")
    write_csv(path, ["member", "step", "time"] + cols, rows)
    outputs.append(path)
    path = os.path.join(run_dir, "summary.json")
    write_json(path, {"members": summaries, "initial_lp_norm": norm0})
    outputs.append(path)
    return outputs, ok


# -- verify -------------------------------------------------------------------------------------------

def _representation_agreement(count: int) -> float:
    times = np.geomspace(1e-2, 10.0, count)
    x = np.linspace(-np.pi, np.pi, 17)
    dx = np.stack(np.meshgrid(x, x, indexing="ij"), axis=-1)
    worst = 0.0
    for t in times:
        a = hk.kernel_value(t, dx, "fourier")
        b = hk.kernel_value(t, dx, "images")
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


def _random_fields(n: int, count: int, seed: int) -> tuple[TorusGrid, np.ndarray]:
    grid = TorusGrid(n)
    c = random_band_field(grid, RngStream(seed, 0, "verify-fields").generator, slope=1.0, size=(count,))
    return grid, grid.project_band(c)


def biot_savart_residuals(grid: TorusGrid, xi: np.ndarray) -> tuple[float, float]:
    """``max |curl BS xi - xi|`` and ``max |eta . u_eta|`` over a batch."""
    u = bs.velocity_coeffs(grid, xi)
    curl = 1j * grid.k1 * u[..., 1, :, :] - 1j * grid.k2 * u[..., 0, :, :]
    div = bs.divergence_coeffs(grid, u)
    return float(np.max(np.abs(curl - xi))), float(np.max(np.abs(div)))


def transport_residual(grid: TorusGrid, xi: np.ndarray) -> float:
    """``max |<div q(xi), xi>|`` over a batch (Parseval inner product)."""
    d = bs.divergence_coeffs(grid, bs.q_coeffs(grid, xi))
    return float(np.max(np.abs(np.real(np.sum(np.conj(xi) * d, axis=(-2, -1))))))


def cmd_verify(cfg: RunConfig, run_dir: str, threads: int) -> tuple[list[str], bool]:
    v = cfg.verify
    outputs, checks = [], []
    if "kernels" in v.checks:
        rows = []
        fits = [("gradient", f) for f in hk.fit_gradient_estimates(v.gradient_betas)]
        fits += [("kernel", f) for f in hk.fit_kernel_estimates(v.kernel_betas)]
        for kind, f in fits:
            passed = abs(f.fitted_slope - f.theoretical_exponent) <= v.slope_tolerance and f.r_squared > v.r_squared_min
            rows.append([kind, f.beta, f.theoretical_exponent, f.fitted_slope, f.r_squared, passed])
            checks.append([f"slope_{kind}_beta_{f.beta}", abs(f.fitted_slope - f.theoretical_exponent),
                           v.slope_tolerance, passed])
        path = os.path.join(run_dir, "kernels.csv")
        write_csv(path, ["estimate", "beta", "theoretical_exponent", "fitted_slope", "r_squared", "passed"], rows)
        outputs.append(path)
    if "representation" in v.checks:
        d = _representation_agreement(v.agreement_times)
        checks.append(["representation_agreement", d, v.agreement_tolerance, d < v.agreement_tolerance])
    if "biot-savart" in v.checks or "transport" in v.checks:
        grid, xi = _random_fields(v.field_grid, v.fields, cfg.seed)
        if "biot-savart" in v.checks:
            c, d = biot_savart_residuals(grid, xi)
            checks.append(["curl_of_biot_savart", c, v.biot_savart_tolerance, c < v.biot_savart_tolerance])
            checks.append(["velocity_divergence", d, v.biot_savart_tolerance, d < v.biot_savart_tolerance])
        if "transport" in v.checks:
            t = transport_residual(grid, xi)
            checks.append(["transport_orthogonality", t, v.transport_tolerance, t < v.transport_tolerance])
    path = os.path.join(run_dir, "checks.csv")
    write_csv(path, ["check", "value", "tolerance", "passed"], checks)
    outputs.append(path)
    return outputs, all(bool(c[3]) for c in checks)


# -- rate ---------------------------------------------------------------------------------------------

def cmd_rate(cfg: RunConfig, run_dir: str, threads: int) -> tuple[list[str], bool]:
    if cfg.rate is None:
        raise ValueError("the 'rate' block is required for this command")
    sim = cfg.simulation_config()
    if not isinstance(sim.noise, MultiplicativeNoiseSpec):
        raise ValueError("rate needs noise.kind = 'multiplicative'")
    r = cfg.rate
    xi0 = cfg.initial.build(sim.grid, sim.p)
    target = r.target.build(sim.grid, sim.p)
    res = rate_function(xi0, target, sim, r.penalty, r.knots, r.gradient, r.stages, r.restarts, cfg.seed,
                        r.max_iter, r.match_rtol)
    path = os.path.join(run_dir, "rate_result.json")
    write_json(path, res.to_dict())
    cpath = os.path.join(run_dir, "control.csv")
    ctl = res.optimal_control
    times = np.arange(ctl.knots) * ctl.knot_dt
    write_csv(cpath, ["knot", "t_start"] + [f"v{j}" for j in range(ctl.n)],
              [[k, float(t)] + [float(x) for x in ctl.values[k]] for k, t in enumerate(times)])
    return [path, cpath], True


# -- mc -----------------------------------------------------------------------------------------------

def cmd_mc(cfg: RunConfig, run_dir: str, threads: int) -> tuple[list[str], bool]:
    if cfg.mc is None:
        raise ValueError("the 'mc' block is required for this command")
    sim = cfg.simulation_config()
    if sim.noise is None:
        raise ValueError("mc needs a noise model")
    b = cfg.mc
    xi0 = cfg.initial.build(sim.grid, sim.p)
    trunc = cfg.truncation.build(sim.grid, xi0, sim.p) if cfg.truncation.enabled and isinstance(
        sim.noise, MultiplicativeNoiseSpec) else None
    ev = Event(b.event.kind, b.event.threshold, tuple(b.event.mode), b.event.component)
    est = mc_estimate(ev, b.epsilons, b.samples, sim, xi0, cfg.seed, trunc, b.chunk, threads)
    path = os.path.join(run_dir, "mc.csv")
    header = ["epsilon", "samples", "hits", "p_hat", "wilson_low", "wilson_high", "eps_log_p"]
    write_csv(path, header, [[row[h] for h in header] for row in est.rows()])
    spath = os.path.join(run_dir, "mc_summary.json")
    write_json(spath, {"event": est.event, "slope": _finite(est.slope), "intercept": _finite(est.intercept),
                       "fitted_epsilons": est.fitted_epsilons})
    return [path, spath], True


def _finite(x: float):
    return None if not np.isfinite(x) else float(x)


# -- probes -------------------------------------------------------------------------------------------

def cmd_probe_lipschitz(cfg: RunConfig, run_dir: str, threads: int) -> tuple[list[str], bool]:
    b = cfg.probe_lipschitz
    if b is None:
        raise ValueError("the 'probe_lipschitz' block is required for this command")
    sim = cfg.simulation_config()
    if not isinstance(sim.noise, AdditiveNoiseSpec):
        raise ValueError("probe-lipschitz needs noise.kind = 'additive'")
    results = [lipschitz_probe(b.R1, r2, b.pairs, sim, cfg.seed) for r2 in b.R2]
    rows = [[s["R1"], s["R2"], s["pairs"], s["max_ratio_lp"], s["median_ratio_lp"], s["max_ratio_sup"],
             s["median_ratio_sup"]] for s in (r.summary() for r in results)]
    path = os.path.join(run_dir, "lipschitz.csv")
    write_csv(path, ["R1", "R2", "pairs", "max_ratio_lp", "median_ratio_lp", "max_ratio_sup", "median_ratio_sup"],
              rows)
    order = np.argsort(b.R2)
    med = [results[i].median_ratio_lp for i in order]
    trend = bool(all(y >= x for x, y in zip(med, med[1:])))
    spath = os.path.join(run_dir, "lipschitz_summary.json")
    write_json(spath, {"median_increasing_in_R2": trend,
                       "all_finite": True, "probes": [r.summary() for r in results]})
    if not trend:
        log.warning("median difference quotient is not increasing in R2 (flagged, not an error)")
    return [path, spath], True


def cmd_probe_uniform(cfg: RunConfig, run_dir: str, threads: int) -> tuple[list[str], bool]:
    b = cfg.probe_uniform
    if b is None:
        raise ValueError("the 'probe_uniform' block is required for this command")
    sim = cfg.simulation_config()
    if not isinstance(sim.noise, MultiplicativeNoiseSpec):
        raise ValueError("probe-uniform needs noise.kind = 'multiplicative'")
    xi0s = [f.build(sim.grid, sim.p) for f in b.xi0_set]
    ctls = [c.build(sim.T, sim.noise.n) for c in b.controls]
    res = uniform_convergence_probe(sim, xi0s, ctls, b.epsilons, b.samples, b.deltas, cfg.seed)
    path = os.path.join(run_dir, "uniform.csv")
    header = ["xi0", "control", "epsilon", "norm", "delta", "p_hat", "mean_distance"]
    write_csv(path, header, [[r[h] for h in header] for r in res.rows])
    vpath = os.path.join(run_dir, "uniform_variance.csv")
    vh = ["xi0", "control", "norm", "delta", "eps_a", "eps_b", "var_shared", "var_independent"]
    write_csv(vpath, vh, [[r[h] for h in vh] for r in res.variance_comparison])
    spath = os.path.join(run_dir, "uniform_summary.json")
    write_json(spath, {
        "epsilons": res.epsilons,
        "max_over_grid": {k: {repr(e): p for e, p in d.items()} for k, d in res.max_over_grid.items()},
        "monotone": res.monotone,
        "limitations": res.limitations,
    })
    return [path, vpath, spath], res.all_monotone


COMMANDS: dict[str, Callable] = {
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "rate": cmd_rate,
    "mc": cmd_mc,
    "probe-lipschitz": cmd_probe_lipschitz,
    "probe-uniform": cmd_probe_uniform,
}
