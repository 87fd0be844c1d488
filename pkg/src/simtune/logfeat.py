"""Run logs and the per-run feature vector the performance oracle trains on.

A log is a line-oriented ``KEY=VALUE`` document. Everything the oracle sees
about a past run is recovered from that log, the case description (grid
maps, wells) and the curves table, so the features a parser can rebuild are
exactly the features used for training.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, fields

import numpy as np

from .simkernel.model import SIMULATOR_ID, SimulationCase, SimulationResult, table_from_csv

MANDATORY_KEYS = (
    "SIMULATOR_ID",
    "END_STATUS",
    "ELAPSED_S",
    "CPU_S",
    "MEMORY_PEAK_MB",
    "TIMESTEPS",
    "NEWTON_CYCLES",
    "LINEAR_ITERS",
    "SOLVER_FAILURES",
    "CUTS",
    "DAYS_SIMULATED",
    "AVG_IMPLICITNESS",
    "MBE_OIL",
    "MBE_WATER",
    "MBE_GAS",
    "KERNEL_ASSEMBLY_S",
    "KERNEL_LINSOLVE_S",
    "KERNEL_WELLS_S",
    "KERNEL_IO_S",
)
KERNEL_KEYS = {
    "assembly": "KERNEL_ASSEMBLY_S",
    "linear_solve": "KERNEL_LINSOLVE_S",
    "well_management": "KERNEL_WELLS_S",
    "io": "KERNEL_IO_S",
}
END_STATUSES = ("NORMAL", "ABNORMAL", "TIMEOUT")
KNOWN_SIMULATORS = (SIMULATOR_ID,)
HIST_BINS = 10
DAYS_PER_YEAR = 365.25

_KEY_RE = re.compile(r"^[A-Z][A-Z0-9_]*$")


class LogFormatError(ValueError):
    """A log line is not of the form ``KEY=VALUE``."""


class MissingKeyError(KeyError):
    """A mandatory key is absent from a log."""


@dataclass
class LogDocument:
    records: list[tuple[str, str]] = field(default_factory=list)

    def get(self, key: str, default=None):
        for k, v in self.records:
            if k == key:
                return v
        return default

    def __getitem__(self, key: str) -> str:
        value = self.get(key)
        if value is None:
            raise MissingKeyError(key)
        return value

    def __contains__(self, key: str) -> bool:
        return any(k == key for k, _ in self.records)

    def keys(self) -> list[str]:
        return [k for k, _ in self.records]

    def number(self, key: str) -> float:
        return float(self[key])

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.records)


def _num(x) -> str:
    return repr(float(x))


def emit_log(result: SimulationResult, case: SimulationCase) -> LogDocument:
    """Write the run log of a finished (or interrupted) simulation."""
    c = result.counters
    kt = result.kernel_timings
    records = [
        ("SIMULATOR_ID", SIMULATOR_ID),
        ("END_STATUS", result.status.upper()),
        ("ELAPSED_S", _num(result.elapsed_s)),
        ("CPU_S", _num(result.cpu_s)),
        ("MEMORY_PEAK_MB", _num(result.memory_peak_mb)),
        ("TIMESTEPS", str(int(c.timesteps))),
        ("NEWTON_CYCLES", str(int(c.newton_cycles))),
        ("LINEAR_ITERS", str(int(c.linear_iterations))),
        ("SOLVER_FAILURES", str(int(c.solver_failures))),
        ("CUTS", str(int(c.cuts))),
        ("DAYS_SIMULATED", _num(result.days_simulated)),
        ("AVG_IMPLICITNESS", _num(result.average_implicitness)),
        ("MBE_OIL", _num(result.mbe["oil"])),
        ("MBE_WATER", _num(result.mbe["water"])),
        ("MBE_GAS", _num(result.mbe["gas"])),
    ]
    records += [(KERNEL_KEYS[k], _num(kt.get(k, 0.0))) for k in KERNEL_KEYS]
    records += [
        ("ACTIVE_BLOCKS", str(case.grid.active_blocks)),
        ("TOTAL_BLOCKS", str(case.grid.total_blocks)),
        ("WELLS", str(len(case.wells))),
        ("DOMS", "1"),
        ("HORIZON_DAYS", _num(case.horizon_days)),
        ("CLOCK", result.clock),
    ]
    if result.message:
        records.append(("MESSAGE", " ".join(result.message.split())))
    return LogDocument(records)


def parse_log(text: str) -> LogDocument:
    """Read a ``KEY=VALUE`` log; unknown keys are kept in order.

    ``END_STATUS`` is always required, and a ``NORMAL`` log must carry every
    mandatory key.
    """
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep or not _KEY_RE.match(key):
            raise LogFormatError(f"line {lineno}: expected KEY=VALUE, got {line!r}")
        records.append((key, value))
    doc = LogDocument(records)
    if "END_STATUS" not in doc:
        raise MissingKeyError("END_STATUS")
    if doc["END_STATUS"] == "NORMAL":
        for key in MANDATORY_KEYS:
            if key not in doc:
                raise MissingKeyError(key)
    return doc


# statistics ---------------------------------------------------------------

@dataclass
class CurveStats:
    min: float
    max: float
    mean: float
    std: float
    histogram: list[int]

    def flatten(self) -> list[float]:
        return [self.min, self.max, self.mean, self.std, *map(float, self.histogram)]


def curve_statistics(series) -> CurveStats:
    """Min, max, mean, population std and a 10-bin histogram over [min, max]."""
    x = np.asarray(series, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("cannot summarize an empty series")
    lo, hi = float(x.min()), float(x.max())
    if hi > lo:
        counts, _ = np.histogram(x, bins=HIST_BINS, range=(lo, hi))
        mean, std = float(x.mean()), float(x.std())
    else:
        # constant series: exact moments, everything in the first bin
        counts = np.zeros(HIST_BINS, dtype=int)
        counts[0] = x.size
        mean, std = lo, 0.0
    return CurveStats(lo, hi, mean, std, [int(v) for v in counts])


# feature vector -----------------------------------------------------------

@dataclass
class FeatureVector:
    """One completed run, slot by slot in the declared order."""

    active_blocks: int
    cuts: int
    days_simulated: float
    doms: int
    newton_cycles: int
    solver_failures: int
    timesteps: int
    solver_iterations: int
    total_blocks: int
    wells: int
    et_per_timestep: float
    perm_x_stats: CurveStats
    perm_y_stats: CurveStats
    poro_stats: CurveStats
    gp_stats: CurveStats
    np_stats: CurveStats
    wp_stats: CurveStats
    avg_implicitness: float
    kernel_timings: dict[str, float]
    cpu_time: float
    elapsed_time: float
    end_status: str
    mbe_o: float
    mbe_w: float
    mbe_g: float
    memory_peak_mb: float
    sim_horizon_years: float
    simulator_id: str

    def flatten(self) -> np.ndarray:
        out: list[float] = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, CurveStats):
                out += v.flatten()
            elif f.name == "kernel_timings":
                out += [float(v.get(k, 0.0)) for k in KERNEL_KEYS]
            elif f.name == "end_status":
                out += [1.0 if v == s else 0.0 for s in END_STATUSES]
            elif f.name == "simulator_id":
                out += [1.0 if v == s else 0.0 for s in KNOWN_SIMULATORS]
                out.append(0.0 if v in KNOWN_SIMULATORS else 1.0)
            else:
                out.append(float(v))
        return np.array(out)

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = v.__dict__.copy() if isinstance(v, CurveStats) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureVector":
        kw = {}
        for f in fields(cls):
            v = d[f.name]
            kw[f.name] = CurveStats(**v) if f.name.endswith("_stats") else v
        return cls(**kw)


def _stats_names(prefix: str) -> list[str]:
    return [f"{prefix}_{s}" for s in ("min", "max", "mean", "std")] + [
        f"{prefix}_hist{i}" for i in range(HIST_BINS)
    ]


def feature_names() -> list[str]:
    """Column names of :meth:`FeatureVector.flatten`, in order."""
    names: list[str] = []
    for f in fields(FeatureVector):
        if f.name.endswith("_stats"):
            names += _stats_names(f.name[: -len("_stats")])
        elif f.name == "kernel_timings":
            names += [f"kernel_{k}" for k in KERNEL_KEYS]
        elif f.name == "end_status":
            names += [f"end_status_{s.lower()}" for s in END_STATUSES]
        elif f.name == "simulator_id":
            names += [f"simulator_{s}" for s in KNOWN_SIMULATORS] + ["simulator_other"]
        else:
            names.append(f.name)
    return names


FEATURE_LENGTH = len(feature_names())
ONE_HOT_FEATURES = tuple(n for n in feature_names() if n.startswith(("end_status_", "simulator_")))


def _grid_stats(case: SimulationCase):
    g = case.grid
    act = g.active_mask
    return curve_statistics(g.perm_x[act]), curve_statistics(g.perm_y[act]), curve_statistics(g.porosity[act])


def _curve_stats(curves: dict[str, np.ndarray]):
    return tuple(
        curve_statistics(curves[name])
        for name in ("field_gas_prod", "field_oil_prod", "field_water_prod")
    )


def extract_features(log: LogDocument, case: SimulationCase, curves) -> FeatureVector:
    """Build the feature vector of one run from its log, case and curves.

    ``curves`` is either the curves CSV text or a ``{name: series}`` mapping.
    """
    if "END_STATUS" not in log:
        raise MissingKeyError("END_STATUS")
    if isinstance(curves, str):
        _, curves = table_from_csv(curves)
    timesteps = int(log.number("TIMESTEPS"))
    if timesteps <= 0:
        raise ValueError("log reports zero timesteps; nothing to characterize")
    elapsed = log.number("ELAPSED_S")
    kx, ky, phi = _grid_stats(case)
    gp, npr, wp = _curve_stats(curves)
    return FeatureVector(
        active_blocks=int(log.get("ACTIVE_BLOCKS", case.grid.active_blocks)),
        cuts=int(log.number("CUTS")),
        days_simulated=log.number("DAYS_SIMULATED"),
        doms=int(log.get("DOMS", 1)),
        newton_cycles=int(log.number("NEWTON_CYCLES")),
        solver_failures=int(log.number("SOLVER_FAILURES")),
        timesteps=timesteps,
        solver_iterations=int(log.number("LINEAR_ITERS")),
        total_blocks=int(log.get("TOTAL_BLOCKS", case.grid.total_blocks)),
        wells=int(log.get("WELLS", len(case.wells))),
        et_per_timestep=elapsed / timesteps,
        perm_x_stats=kx,
        perm_y_stats=ky,
        poro_stats=phi,
        gp_stats=gp,
        np_stats=npr,
        wp_stats=wp,
        avg_implicitness=log.number("AVG_IMPLICITNESS"),
        kernel_timings={k: log.number(key) for k, key in KERNEL_KEYS.items()},
        cpu_time=log.number("CPU_S"),
        elapsed_time=elapsed,
        end_status=log["END_STATUS"],
        mbe_o=log.number("MBE_OIL"),
        mbe_w=log.number("MBE_WATER"),
        mbe_g=log.number("MBE_GAS"),
        memory_peak_mb=log.number("MEMORY_PEAK_MB"),
        sim_horizon_years=float(log.get("HORIZON_DAYS", case.horizon_days)) / DAYS_PER_YEAR,
        simulator_id=log["SIMULATOR_ID"],
    )


def features_from_result(result: SimulationResult, case: SimulationCase) -> FeatureVector:
    """Feature vector straight from a result object, without the log detour."""
    c = result.counters
    if c.timesteps <= 0:
        raise ValueError("run has zero timesteps; nothing to characterize")
    kx, ky, phi = _grid_stats(case)
    gp, npr, wp = _curve_stats(result.curves)
    return FeatureVector(
        active_blocks=case.grid.active_blocks,
        cuts=c.cuts,
        days_simulated=result.days_simulated,
        doms=1,
        newton_cycles=c.newton_cycles,
        solver_failures=c.solver_failures,
        timesteps=c.timesteps,
        solver_iterations=c.linear_iterations,
        total_blocks=case.grid.total_blocks,
        wells=len(case.wells),
        et_per_timestep=result.elapsed_s / c.timesteps,
        perm_x_stats=kx,
        perm_y_stats=ky,
        poro_stats=phi,
        gp_stats=gp,
        np_stats=npr,
        wp_stats=wp,
        avg_implicitness=result.average_implicitness,
        kernel_timings={k: float(result.kernel_timings.get(k, 0.0)) for k in KERNEL_KEYS},
        cpu_time=result.cpu_s,
        elapsed_time=result.elapsed_s,
        end_status=result.status.upper(),
        mbe_o=result.mbe["oil"],
        mbe_w=result.mbe["water"],
        mbe_g=result.mbe["gas"],
        memory_peak_mb=result.memory_peak_mb,
        sim_horizon_years=case.horizon_days / DAYS_PER_YEAR,
        simulator_id=SIMULATOR_ID,
    )


def derived_metrics(fv: FeatureVector) -> tuple[float, float]:
    """Newton cycles per timestep and linear iterations per Newton cycle."""
    if fv.timesteps <= 0 or fv.newton_cycles <= 0:
        raise ZeroDivisionError("need positive timesteps and Newton cycles")
    return fv.newton_cycles / fv.timesteps, fv.solver_iterations / fv.newton_cycles
