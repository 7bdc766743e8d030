"""Run configuration: a strict pydantic schema plus builders for the domain objects."""

from __future__ import annotations

import hashlib
import json
from fractions import Fraction
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..noise import AdditiveNoiseSpec, Channel, MultiplicativeNoiseSpec, SIGMA_FAMILIES
from ..solver import ControlPath, PicardSettings, SimulationConfig, TruncationSpec
from ..torus import SpectralField, TorusGrid, from_function, lp_norm_samples, random_band_field, zeros
from ..noise import RngStream


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridConfig(_Strict):
    n: int = 32
    dealias_fraction: str = "2/3"

    @field_validator("n")
    @classmethod
    def _pow2(cls, v):
        if v < 4 or v & (v - 1):
            raise ValueError("n must be a power of two >= 4")
        return v

    @field_validator("dealias_fraction")
    @classmethod
    def _frac(cls, v):
        f = Fraction(v)
        if not 0 < f <= 1:
            raise ValueError("dealias_fraction must lie in (0, 1]")
        return v

    def build(self) -> TorusGrid:
        return TorusGrid(self.n, Fraction(self.dealias_fraction))


class ModeTerm(_Strict):
    mode: tuple[int, int]
    kind: Literal["cos", "sin"] = "cos"
    amplitude: float = 1.0


class FieldConfig(_Strict):
    """A vorticity field: zero, a sum of Fourier modes, or a seeded random band field."""

    kind: Literal["zero", "modes", "random"] = "zero"
    terms: list[ModeTerm] = Field(default_factory=list)
    seed: int = Field(0, ge=0)
    slope: float = 2.0
    lp_norm: Optional[float] = Field(None, gt=0)

    def build(self, grid: TorusGrid, p: float) -> SpectralField:
        if self.kind == "zero":
            return zeros(grid)
        if self.kind == "modes":
            if not self.terms:
                raise ValueError("field kind 'modes' needs at least one term")

            def f(x1, x2):
                out = np.zeros_like(x1)
                for t in self.terms:
                    ph = t.mode[0] * x1 + t.mode[1] * x2
                    out = out + t.amplitude * (np.cos(ph) if t.kind == "cos" else np.sin(ph))
                return out

            fld = from_function(grid, f)
            c = grid.project_band(fld.coeffs)
        else:
            c = grid.project_band(random_band_field(grid, RngStream(self.seed, 0, "field").generator, self.slope))
        if self.lp_norm is not None:
            norm = float(lp_norm_samples(grid, grid.inverse(c), p))
            if norm == 0:
                raise ValueError("cannot rescale a zero field to a positive norm")
            c = c * (self.lp_norm / norm)
        return SpectralField(grid, c)


class ChannelConfig(_Strict):
    mode: tuple[int, int] = (1, 0)
    kind: Literal["cos", "sin", "uniform"] = "cos"
    amplitude: float = 1.0


class NoiseConfig(_Strict):
    kind: Literal["none", "additive", "multiplicative"] = "none"
    a: Optional[float] = Field(None, gt=0)
    family: str = "constant"
    channels: list[ChannelConfig] = Field(default_factory=lambda: [ChannelConfig()])
    K: Optional[float] = Field(None, gt=0)
    L: Optional[float] = Field(None, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "additive" and self.a is None:
            raise ValueError("additive noise needs the regularity exponent 'a'")
        if self.family not in SIGMA_FAMILIES:
            raise ValueError(f"unknown sigma family {self.family!r}; choose from {sorted(SIGMA_FAMILIES)}")
        if self.kind == "multiplicative" and not self.channels:
            raise ValueError("multiplicative noise needs at least one channel")
        return self

    def build(self):
        if self.kind == "none":
            return None
        if self.kind == "additive":
            return AdditiveNoiseSpec(self.a)
        chans = tuple(Channel(tuple(c.mode), c.kind, c.amplitude) for c in self.channels)
        return MultiplicativeNoiseSpec(self.family, chans, self.K, self.L)


class SimulationBlock(_Strict):
    T: float = Field(gt=0)
    dt: float = Field(gt=0)
    epsilon: float = Field(0.0, ge=0)
    p: float = Field(4.0, gt=2)
    nonlinear: bool = True
    scheme: Literal["euler", "heun"] = "euler"


class TruncationConfig(_Strict):
    enabled: bool = True
    R: Optional[float] = Field(None, gt=0)
    truncate_sigma: bool = True

    def build(self, grid: TorusGrid, xi0: SpectralField, p: float) -> TruncationSpec:
        if not self.enabled:
            return TruncationSpec.off()
        if self.R is None:
            return TruncationSpec.default_for(grid, xi0.coeffs, p, truncate_sigma=self.truncate_sigma)
        return TruncationSpec(self.R, True, self.truncate_sigma)


class PicardConfig(_Strict):
    lam: float = Field(100.0, gt=0)
    tol: float = Field(1e-10, gt=0)
    max_iter: int = Field(50, ge=1)

    def build(self) -> PicardSettings:
        return PicardSettings(self.lam, self.tol, self.max_iter)


class SimulateBlock(_Strict):
    method: Literal["step", "picard"] = "step"
    ensemble: int = Field(1, ge=1)
    store_every: int = Field(0, ge=0)


class VerifyBlock(_Strict):
    checks: list[Literal["kernels", "representation", "biot-savart", "transport"]] = Field(
        default_factory=lambda: ["kernels", "representation", "biot-savart", "transport"])
    gradient_betas: list[float] = Field(default_factory=lambda: [0.5, 1.0, 1.25])
    kernel_betas: list[float] = Field(default_factory=lambda: [0.5, 1.0, 1.5])
    slope_tolerance: float = 0.05
    r_squared_min: float = 0.999
    fields: int = Field(100, ge=1)
    field_grid: int = 64
    agreement_times: int = Field(100, ge=2)
    agreement_tolerance: float = 1e-10
    biot_savart_tolerance: float = 1e-13
    transport_tolerance: float = 1e-12


class ControlConfig(_Strict):
    """Piecewise-constant control: explicit knot values or a constant vector."""

    knots: int = Field(1, ge=1)
    values: Optional[list[list[float]]] = None
    constant: Optional[list[float]] = None
    M: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _one_of(self):
        if (self.values is None) == (self.constant is None):
            raise ValueError("give exactly one of 'values' or 'constant'")
        if self.values is not None and len(self.values) != self.knots:
            raise ValueError(f"'values' has {len(self.values)} rows, expected knots={self.knots}")
        return self

    def build(self, T: float, n: int) -> ControlPath:
        if self.constant is not None:
            vals = np.tile(np.asarray(self.constant, dtype=float), (self.knots, 1))
        else:
            vals = np.asarray(self.values, dtype=float)
        if vals.shape[1] != n:
            raise ValueError(f"control has {vals.shape[1]} channels, noise has {n}")
        return ControlPath(vals, T, self.M)


class RateBlock(_Strict):
    target: FieldConfig
    penalty: float = Field(10.0, gt=0)
    stages: int = Field(3, ge=1)
    knots: Optional[int] = Field(None, ge=1)
    gradient: Literal["adjoint", "fd"] = "adjoint"
    restarts: int = Field(3, ge=0)
    max_iter: int = Field(500, ge=1)
    match_rtol: float = Field(0.02, ge=0)


class EventConfig(_Strict):
    kind: Literal["always", "terminal_l2_exceeds", "sup_lp_exceeds", "terminal_mode_amplitude_exceeds"]
    threshold: float = 0.0
    mode: tuple[int, int] = (1, 0)
    component: Literal["cos", "sin"] = "cos"


class MCBlock(_Strict):
    event: EventConfig
    epsilons: list[float] = Field(min_length=1)
    samples: int = Field(ge=1)
    chunk: int = Field(25_000, ge=1)

    @field_validator("epsilons")
    @classmethod
    def _pos(cls, v):
        if any(e <= 0 for e in v):
            raise ValueError("epsilons must be positive")
        return v


class LipschitzBlock(_Strict):
    R1: float = Field(1.0, gt=0)
    R2: list[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    pairs: int = Field(50, ge=1)


class UniformBlock(_Strict):
    xi0_set: list[FieldConfig] = Field(min_length=1)
    controls: list[ControlConfig] = Field(min_length=1)
    epsilons: list[float] = Field(default_factory=lambda: [1e-1, 1e-2, 1e-3])
    samples: int = Field(200, ge=1)
    deltas: list[float] = Field(default_factory=lambda: [0.1, 0.05])


class RunConfig(_Strict):
    """Top-level configuration shared by every subcommand."""

    seed: int = Field(0, ge=0, lt=2**64)
    output_dir: str = "runs"
    grid: GridConfig = Field(default_factory=GridConfig)
    simulation: SimulationBlock
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    initial: FieldConfig = Field(default_factory=FieldConfig)
    truncation: TruncationConfig = Field(default_factory=TruncationConfig)
    picard: PicardConfig = Field(default_factory=PicardConfig)
    simulate: SimulateBlock = Field(default_factory=SimulateBlock)
    verify: VerifyBlock = Field(default_factory=VerifyBlock)
    rate: Optional[RateBlock] = None
    mc: Optional[MCBlock] = None
    probe_lipschitz: Optional[LipschitzBlock] = None
    probe_uniform: Optional[UniformBlock] = None

    def simulation_config(self) -> SimulationConfig:
        s = self.simulation
        return SimulationConfig(self.grid.build(), s.T, s.dt, s.epsilon, s.p, self.noise.build(),
                                s.nonlinear, s.scheme)

    def resolved(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.resolved()).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=True) + "\n"


def json_schema() -> dict:
    return RunConfig.model_json_schema()


def verify_default() -> RunConfig:
    """Configuration used by ``verify`` when no file is given."""
    return RunConfig(simulation=SimulationBlock(T=1.0, dt=1e-3))
