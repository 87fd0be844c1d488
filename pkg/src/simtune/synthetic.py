"""Synthetic history-matching problems on the built-in simulator.

Model parameters are the natural log of cell permeability (mD); porosity
follows from permeability through a linear transform in log space. The
observed data are cumulative well volumes (by default the producer's oil)
at every report time after day zero.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .esmda import EnsembleState, ObservationSet
from .simkernel import NumericalControls, SimulationCase, SimulationResult, quarter_five_spot, run_simulation
from .simkernel.cases import lognormal_field

OBSERVED = ("PROD1:oil_prod",)


@dataclass
class EnsembleGeneratorSpec:
    seed: int = 0
    n_members: int = 20
    nx: int = 8
    ny: int = 8
    mean_log: float = float(np.log(100.0))
    std_log: float = 1.0
    corr_len: float = 3.0
    poro_base: float = 0.2
    poro_slope: float = 0.03
    truth: str | int = "held_out"
    noise_level: float = 0.05
    horizon_days: float = 120.0
    report_days: float = 20.0
    inj_rate: float = 30.0
    prod_bhp: float = 150.0
    cell_size: float = 20.0
    thickness: float = 10.0
    observed: tuple[str, ...] = OBSERVED

    def __post_init__(self):
        self.observed = tuple(self.observed)
        if not self.observed:
            raise ValueError("at least one observed curve is needed")
        if self.std_log < 0:
            raise ValueError("std_log must be non-negative")
        if self.n_members < 2:
            raise ValueError("an ensemble needs at least two members")
        if self.truth != "held_out" and not 0 <= int(self.truth) < self.n_members:
            raise ValueError("truth index must be < n_members or 'held_out'")
        if self.noise_level <= 0:
            raise ValueError("noise_level must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GridHistoryMatch:
    """Maps a log-permeability column to a quarter five-spot case and back to data."""

    nx: int
    ny: int
    horizon_days: float
    report_days: float
    inj_rate: float
    prod_bhp: float
    mean_log: float
    poro_base: float = 0.2
    poro_slope: float = 0.03
    cell_size: float = 20.0
    thickness: float = 10.0
    observed: tuple[str, ...] = OBSERVED
    log_bounds: tuple[float, float] = (0.0, float(np.log(1e4)))  # 1 mD .. 10 D

    @classmethod
    def from_spec(cls, spec: EnsembleGeneratorSpec) -> "GridHistoryMatch":
        return cls(spec.nx, spec.ny, spec.horizon_days, spec.report_days, spec.inj_rate, spec.prod_bhp,
                   spec.mean_log, spec.poro_base, spec.poro_slope, spec.cell_size, spec.thickness,
                   tuple(spec.observed))

    @property
    def param_names(self) -> list[str]:
        return [f"logk_{i}_{j}" for j in range(self.ny) for i in range(self.nx)]

    @property
    def report_times(self) -> np.ndarray:
        n = int(round(self.horizon_days / self.report_days))
        return self.report_days * np.arange(1, n + 1)

    @property
    def obs_labels(self) -> list[str]:
        return [f"{name}@{t:g}" for name in self.observed for t in self.report_times]

    def build_case(self, m, controls: NumericalControls | None = None) -> SimulationCase:
        # updates are unbounded, so clip to a physical range before exponentiating
        logk = np.clip(np.asarray(m, dtype=float), *self.log_bounds)
        perm = np.exp(logk)
        poro = np.clip(self.poro_base + self.poro_slope * (logk - self.mean_log), 0.05, 0.35)
        return quarter_five_spot(nx=self.nx, ny=self.ny, perm=perm, porosity=poro, horizon=self.horizon_days,
                                 report=self.report_days, inj_rate=self.inj_rate, prod_bhp=self.prod_bhp,
                                 dx=self.cell_size, dy=self.cell_size, dz=self.thickness,
                                 controls=controls or NumericalControls())

    def observe(self, result: SimulationResult) -> np.ndarray:
        days = np.asarray(result.days)
        out = []
        for name in self.observed:
            curve = np.asarray(result.curves[name])
            out.append(np.interp(self.report_times, days, curve))
        return np.concatenate(out)


def sample_members(spec: EnsembleGeneratorSpec, n: int, rng) -> np.ndarray:
    """``n`` log-permeability columns from the smoothed log-normal prior."""
    rng = np.random.default_rng(rng)
    cols = [np.log(lognormal_field(spec.nx, spec.ny, spec.mean_log, spec.std_log, spec.corr_len, rng))
            for _ in range(n)]
    return np.column_stack(cols)


def generate_ensemble(spec: EnsembleGeneratorSpec) -> tuple[GridHistoryMatch, EnsembleState, np.ndarray]:
    """(problem, prior ensemble, truth column). A held-out truth is drawn after the members."""
    rng = np.random.default_rng(spec.seed)
    problem = GridHistoryMatch.from_spec(spec)
    M = sample_members(spec, spec.n_members, rng)
    truth = sample_members(spec, 1, rng)[:, 0] if spec.truth == "held_out" else M[:, int(spec.truth)].copy()
    return problem, EnsembleState(M, problem.param_names), truth


def synthetic_observations(problem: GridHistoryMatch, truth: np.ndarray, noise_level: float,
                           seed) -> ObservationSet:
    """Truth curves plus Gaussian noise; C_D is the noise variance.

    The noise standard deviation is ``noise_level`` times the datum, floored
    at 5 % of its series maximum so pre-breakthrough zeros keep a positive
    variance.
    """
    controls = NumericalControls(solver_kind="direct", ordering="rcm", dt_max=5.0)
    result = run_simulation(problem.build_case(truth, controls))
    if result.status != "normal":
        raise RuntimeError(f"truth simulation ended {result.status}: {result.message}")
    clean = problem.observe(result)
    n_t = problem.report_times.size
    sd = np.empty_like(clean)
    for k in range(len(problem.observed)):
        block = clean[k * n_t:(k + 1) * n_t]
        floor = 0.05 * max(float(np.abs(block).max()), 1e-6)
        sd[k * n_t:(k + 1) * n_t] = noise_level * np.maximum(np.abs(block), floor)
    rng = np.random.default_rng(seed)
    return ObservationSet(clean + sd * rng.standard_normal(clean.size), sd ** 2, problem.obs_labels)
