"""Domain types for the two-phase oil-water simulator.

Units are metric throughout: days, bar, m3, mD, cP. Cell maps are stored as
flat arrays of length ``nx * ny`` with the x index running fastest.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

SIMULATOR_ID = "simtune-fv2p-1.0"

ORDERINGS = ("natural", "red-black", "rcm")
SOLVER_KINDS = ("direct", "iterative")
FORMULATIONS = ("fully-implicit", "impes")
UNLIMITED_CUTS = 10_000


class InvalidCaseError(ValueError):
    """Raised when a simulation input violates its invariants."""


def _as_map(values, n: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size == 1:
        arr = np.full(n, float(arr[0]))
    if arr.size != n:
        raise InvalidCaseError(f"{name} has {arr.size} entries, expected {n}")
    return arr


@dataclass
class GridModel:
    nx: int
    ny: int
    dx: float
    dy: float
    dz: float
    perm_x: np.ndarray
    perm_y: np.ndarray
    porosity: np.ndarray
    active_mask: np.ndarray | None = None
    depth: float = 2000.0

    def __post_init__(self):
        n = self.nx * self.ny
        self.perm_x = _as_map(self.perm_x, n, "perm_x")
        self.perm_y = _as_map(self.perm_y, n, "perm_y")
        self.porosity = _as_map(self.porosity, n, "porosity")
        if self.active_mask is None:
            self.active_mask = np.ones(n, dtype=bool)
        else:
            mask = np.asarray(self.active_mask, dtype=bool).ravel()
            if mask.size != n:
                raise InvalidCaseError(f"active_mask has {mask.size} entries, expected {n}")
            self.active_mask = mask

    @property
    def total_blocks(self) -> int:
        return self.nx * self.ny

    @property
    def active_blocks(self) -> int:
        return int(np.count_nonzero(self.active_mask))

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy * self.dz

    def cell_index(self, i: int, j: int) -> int:
        return j * self.nx + i

    def validate(self):
        if self.nx < 1 or self.ny < 1:
            raise InvalidCaseError("grid needs at least one cell")
        if min(self.dx, self.dy, self.dz) <= 0:
            raise InvalidCaseError("cell dimensions must be positive")
        act = self.active_mask
        if not act.any():
            raise InvalidCaseError("grid has no active cells")
        if np.any(self.perm_x[act] <= 0) or np.any(self.perm_y[act] <= 0):
            raise InvalidCaseError("permeability must be positive on active cells")
        phi = self.porosity[act]
        if np.any(phi <= 0) or np.any(phi >= 1):
            raise InvalidCaseError("porosity must lie in (0, 1) on active cells")


@dataclass
class FluidModel:
    mu_o: float = 2.0
    mu_w: float = 0.5
    c_o: float = 1e-4
    c_w: float = 4e-5
    c_r: float = 3e-5
    n_o: float = 2.0
    n_w: float = 2.0
    swc: float = 0.1
    sor: float = 0.1
    krw_max: float = 1.0
    kro_max: float = 1.0
    p_ref: float = 200.0

    def validate(self):
        if self.mu_o <= 0 or self.mu_w <= 0:
            raise InvalidCaseError("viscosities must be positive")
        if min(self.c_o, self.c_w, self.c_r) < 0:
            raise InvalidCaseError("compressibilities must be non-negative")
        if self.n_o < 1 or self.n_w < 1:
            raise InvalidCaseError("Corey exponents must be >= 1")
        for name in ("swc", "sor", "krw_max", "kro_max"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidCaseError(f"{name} must lie in [0, 1]")
        if self.swc + self.sor >= 1.0:
            raise InvalidCaseError("swc + sor must be below 1")


@dataclass
class WellControl:
    """One schedule interval: the well is open on ``[start_day, end_day)``."""

    start_day: float
    end_day: float
    mode: str  # "rate" or "bhp"
    target: float


@dataclass
class WellSpec:
    name: str
    cell: int
    kind: str  # "injector" or "producer"
    well_index: float
    schedule: list[WellControl] = field(default_factory=list)

    def __post_init__(self):
        self.schedule = [c if isinstance(c, WellControl) else WellControl(**c) for c in self.schedule]

    def control_at(self, t: float) -> WellControl | None:
        for c in self.schedule:
            if c.start_day <= t < c.end_day:
                return c
        return None

    def validate(self, grid: GridModel, horizon: float):
        if self.kind not in ("injector", "producer"):
            raise InvalidCaseError(f"well {self.name}: unknown kind {self.kind!r}")
        if not 0 <= self.cell < grid.total_blocks or not grid.active_mask[self.cell]:
            raise InvalidCaseError(f"well {self.name}: cell {self.cell} is not an active cell")
        if self.well_index <= 0:
            raise InvalidCaseError(f"well {self.name}: well index must be positive")
        ordered = sorted(self.schedule, key=lambda c: c.start_day)
        for c in ordered:
            if c.mode not in ("rate", "bhp"):
                raise InvalidCaseError(f"well {self.name}: unknown control mode {c.mode!r}")
            if c.start_day < 0 or c.end_day > horizon + 1e-9 or c.end_day <= c.start_day:
                raise InvalidCaseError(f"well {self.name}: interval outside the horizon")
            if c.mode == "rate" and c.target < 0:
                raise InvalidCaseError(f"well {self.name}: negative rate")
        for a, b in zip(ordered, ordered[1:]):
            if b.start_day < a.end_day:
                raise InvalidCaseError(f"well {self.name}: overlapping schedule intervals")


@dataclass
class NumericalControls:
    """Tunable solver controls; defaults mirror the built-in search space."""

    dt_min: float = 1e-3
    dt_max: float = 365.0
    newton_max: int = 10
    lin_iter_max: int = 10
    lin_tol: float = 1e-4
    north_restart: int = 30
    ncuts_max: int | None = None  # None means unlimited
    norm_press: float = 30.0
    maxchange_press: float = 60.0
    norm_satur: float = 0.1
    maxchange_satur: float = 0.1
    ordering: str = "red-black"
    solver_kind: str = "iterative"
    pivot_stab: str = "off"
    formulation: str = "fully-implicit"

    @property
    def cut_limit(self) -> int:
        return UNLIMITED_CUTS if self.ncuts_max is None else int(self.ncuts_max)

    def validate(self):
        if not 0 < self.dt_min <= self.dt_max:
            raise InvalidCaseError("need 0 < dt_min <= dt_max")
        if self.maxchange_press < self.norm_press or self.maxchange_satur < self.norm_satur:
            raise InvalidCaseError("maxchange_* must be >= norm_*")
        if self.norm_press <= 0 or self.norm_satur <= 0:
            raise InvalidCaseError("norm_* must be positive")
        if not 1e-12 <= self.lin_tol <= 1e-2:
            raise InvalidCaseError("lin_tol must lie in [1e-12, 1e-2]")
        counts = [self.newton_max, self.lin_iter_max, self.north_restart]
        if self.ncuts_max is not None:
            counts.append(self.ncuts_max)
        if min(counts) < 1:
            raise InvalidCaseError("iteration counts must be >= 1")
        if self.ordering not in ORDERINGS:
            raise InvalidCaseError(f"unknown ordering {self.ordering!r}")
        if self.solver_kind not in SOLVER_KINDS:
            raise InvalidCaseError(f"unknown solver kind {self.solver_kind!r}")
        if self.pivot_stab not in ("off", "on"):
            raise InvalidCaseError(f"pivot_stab must be 'off' or 'on'")
        if self.formulation not in FORMULATIONS:
            raise InvalidCaseError(f"unknown formulation {self.formulation!r}")

    def replace(self, **changes) -> "NumericalControls":
        data = asdict(self)
        data.update(changes)
        return NumericalControls(**data)


@dataclass
class SimulationCase:
    grid: GridModel
    fluid: FluidModel
    wells: list[WellSpec]
    controls: NumericalControls
    horizon_days: float
    report_interval_days: float
    p_init: Any = 200.0
    sw_init: Any = 0.1

    def __post_init__(self):
        n = self.grid.total_blocks
        self.p_init = _as_map(self.p_init, n, "p_init")
        self.sw_init = _as_map(self.sw_init, n, "sw_init")

    def validate(self):
        if self.horizon_days <= 0:
            raise InvalidCaseError("horizon_days must be positive")
        if not 0 < self.report_interval_days <= self.horizon_days:
            raise InvalidCaseError("report interval must lie in (0, horizon_days]")
        self.grid.validate()
        self.fluid.validate()
        self.controls.validate()
        names = [w.name for w in self.wells]
        if len(set(names)) != len(names):
            raise InvalidCaseError("well names must be unique")
        for w in self.wells:
            w.validate(self.grid, self.horizon_days)
        act = self.grid.active_mask
        sw = self.sw_init[act]
        if np.any(sw < 0) or np.any(sw > 1):
            raise InvalidCaseError("initial water saturation must lie in [0, 1]")
        if not np.all(np.isfinite(self.p_init[act])):
            raise InvalidCaseError("initial pressure must be finite")

    def with_controls(self, controls: NumericalControls) -> "SimulationCase":
        return SimulationCase(
            grid=self.grid,
            fluid=self.fluid,
            wells=self.wells,
            controls=controls,
            horizon_days=self.horizon_days,
            report_interval_days=self.report_interval_days,
            p_init=self.p_init,
            sw_init=self.sw_init,
        )

    # JSON document -------------------------------------------------------

    def to_dict(self) -> dict:
        def plain(obj):
            out = {}
            for f in fields(obj):
                v = getattr(obj, f.name)
                if isinstance(v, np.ndarray):
                    v = v.tolist()
                out[f.name] = v
            return out

        return {
            "grid": plain(self.grid),
            "fluid": asdict(self.fluid),
            "wells": [asdict(w) for w in self.wells],
            "controls": asdict(self.controls),
            "horizon_days": self.horizon_days,
            "report_interval_days": self.report_interval_days,
            "p_init": self.p_init.tolist(),
            "sw_init": self.sw_init.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SimulationCase":
        return cls(
            grid=GridModel(**data["grid"]),
            fluid=FluidModel(**data["fluid"]),
            wells=[WellSpec(**w) for w in data["wells"]],
            controls=NumericalControls(**data.get("controls", {})),
            horizon_days=data["horizon_days"],
            report_interval_days=data["report_interval_days"],
            p_init=data.get("p_init", 200.0),
            sw_init=data.get("sw_init", 0.1),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SimulationCase":
        return cls.from_dict(json.loads(text))


@dataclass
class RunCounters:
    timesteps: int = 0
    newton_cycles: int = 0
    linear_iterations: int = 0
    solver_failures: int = 0
    cuts: int = 0


KERNELS = ("assembly", "linear_solve", "well_management", "io")


@dataclass
class SimulationResult:
    status: str  # "normal", "abnormal" or "timeout"
    elapsed_s: float
    cpu_s: float
    memory_peak_mb: float
    counters: RunCounters
    kernel_timings: dict[str, float]
    days: np.ndarray
    curves: dict[str, np.ndarray]
    fip_series: dict[str, np.ndarray]
    mbe: dict[str, float]
    average_implicitness: float
    days_simulated: float
    wall_s: float = 0.0
    clock: str = "modeled"
    message: str = ""

    @property
    def mean_abs_mbe(self) -> float:
        return float(np.mean([abs(self.mbe[p]) for p in ("oil", "water", "gas")]))

    def curves_csv(self) -> str:
        return table_to_csv(self.days, self.curves)

    def fip_csv(self) -> str:
        return table_to_csv(self.days, self.fip_series)

    def summary(self) -> dict:
        return {
            "status": self.status,
            "elapsed_s": self.elapsed_s,
            "cpu_s": self.cpu_s,
            "memory_peak_mb": self.memory_peak_mb,
            **asdict(self.counters),
            "days_simulated": self.days_simulated,
            "average_implicitness": self.average_implicitness,
            "mbe_oil": self.mbe["oil"],
            "mbe_water": self.mbe["water"],
            "mbe_gas": self.mbe["gas"],
        }

    def to_dict(self) -> dict:
        return {
            **self.summary(),
            "kernel_timings": dict(self.kernel_timings),
            "wall_s": self.wall_s,
            "clock": self.clock,
            "message": self.message,
            "days": self.days.tolist(),
            "curves": {k: v.tolist() for k, v in self.curves.items()},
            "fip_series": {k: v.tolist() for k, v in self.fip_series.items()},
        }


def table_to_csv(days: np.ndarray, series: dict[str, np.ndarray]) -> str:
    names = list(series)
    lines = [",".join(["day", *names])]
    for k, d in enumerate(days):
        lines.append(",".join([repr(float(d)), *(repr(float(series[n][k])) for n in names)]))
    return "\n".join(lines) + "\n"


def table_from_csv(text: str) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    rows = [line.split(",") for line in text.strip().splitlines()]
    header, body = rows[0], rows[1:]
    if not header or header[0] != "day":
        raise ValueError("curve table must start with a 'day' column")
    data = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))
    return data[:, 0].copy(), {name: data[:, k].copy() for k, name in enumerate(header) if k > 0}
