"""Newton time stepping, timestep control and run bookkeeping."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .assemble import (
    Discretization,
    SimState,
    accumulation,
    active_well_rates,
    assemble_system,
    impes_pressure_residual,
    impes_water_outflow,
)
from .linsolve import LinearSolution, linear_solve, ordering_permutation
from .model import (
    KERNELS,
    NumericalControls,
    RunCounters,
    SimulationCase,
    SimulationResult,
)

NEWTON_TOL = 1e-6  # reduction of the scaled residual relative to the first iterate
RESIDUAL_FLOOR = 1e-12  # scaled residual treated as exactly converged
MAX_SAT_UPDATE = 0.2  # per Newton iteration
GROWTH_CAP = 2.0

# modeled-clock constants (seconds per unit of work)
SEC_PER_FLOP = 2.5e-9
SEC_PER_VALUE_WRITTEN = 1e-7
SEC_STEP_OVERHEAD = 2e-5


class ConvergenceFailure(RuntimeError):
    """A timestep could not be completed even after cutting to ``dt_min``."""

    def __init__(self, message, stats=None):
        super().__init__(message)
        self.stats = stats


class Bookkeeper:
    """Per-kernel time accounting under a modeled or a wall clock.

    The modeled clock converts counted work (flops, values written) to
    seconds with fixed rates, which makes timings reproducible; the wall
    clock uses ``time.perf_counter``.
    """

    def __init__(self, clock: str = "modeled"):
        if clock not in ("modeled", "wall"):
            raise ValueError(f"unknown clock {clock!r}")
        self.clock = clock
        self.kernels = dict.fromkeys(KERNELS, 0.0)
        self.overhead = 0.0
        self.t0 = time.perf_counter()
        self.peak_bytes = 0.0

    def charge(self, kernel: str, modeled_s: float, wall_s: float):
        self.kernels[kernel] += modeled_s if self.clock == "modeled" else wall_s

    def charge_overhead(self, modeled_s: float):
        if self.clock == "modeled":
            self.overhead += modeled_s

    def memory(self, nbytes: float):
        self.peak_bytes = max(self.peak_bytes, nbytes)

    def wall(self) -> float:
        return time.perf_counter() - self.t0

    def elapsed(self) -> float:
        if self.clock == "wall":
            return max(self.wall(), sum(self.kernels.values()))
        return sum(self.kernels.values()) + self.overhead


@dataclass
class StepStats:
    dt_used: float = 0.0
    newton_cycles: int = 0
    linear_iterations: int = 0
    solver_failures: int = 0
    cuts: int = 0
    max_dp: float = 0.0
    max_ds: float = 0.0
    attempts: list = field(default_factory=list)


def select_timestep(prev_dt: float, observed_dp: float, observed_ds: float, controls: NumericalControls) -> float:
    """Next timestep from the observed per-cell changes of the last step.

    The step is scaled so the largest changes would hit the normal variation
    targets, never growing by more than a factor of two.
    """
    with np.errstate(divide="ignore"):
        rp = controls.norm_press / observed_dp if observed_dp > 0 else np.inf
        rs = controls.norm_satur / observed_ds if observed_ds > 0 else np.inf
    factor = min(rp, rs, GROWTH_CAP)
    return float(np.clip(prev_dt * factor, controls.dt_min, controls.dt_max))


def compute_mbe(fip_t: float, ofip: float, cum_prod_t: float, cum_inj_t: float) -> float:
    """Material balance error of one phase, in percent."""
    denom = ofip - cum_prod_t + cum_inj_t
    if denom == 0:
        raise ZeroDivisionError("material balance denominator is zero")
    return (fip_t / denom - 1.0) * 100.0


class _Context:
    """Everything ``solve_timestep`` needs besides the state."""

    def __init__(self, disc: Discretization, controls: NumericalControls, book: Bookkeeper | None = None):
        self.disc = disc
        self.controls = controls
        self.book = book or Bookkeeper()
        impes = controls.formulation == "impes"
        self.impes = impes
        self.block = 1 if impes else 2
        pattern = disc.pattern_p if impes else disc.pattern_fi
        probe = pattern.matrix(np.ones(pattern.order.size))
        self.perm = ordering_permutation(probe, controls.ordering, self.block)
        self.static_bytes = 8.0 * 12 * disc.n + 16.0 * disc.n_faces

    def solve(self, J, rhs) -> LinearSolution:
        w0 = time.perf_counter()
        sol = linear_solve(J, rhs, self.controls, block_size=self.block, perm=self.perm)
        self.book.charge("linear_solve", SEC_PER_FLOP * sol.work, time.perf_counter() - w0)
        nnz = J[2].size if isinstance(J, tuple) else J.nnz
        self.book.memory(self.static_bytes + 12.0 * nnz + sol.memory_bytes)
        return sol

    def charge_assembly(self, wall_s):
        d = self.disc
        neq = self.block
        flops = 60.0 * d.n * neq * neq + 40.0 * d.n_faces * neq
        self.book.charge("assembly", SEC_PER_FLOP * flops, wall_s)

    def charge_wells(self, wall_s):
        flops = 400.0 * len(self.disc.wells)
        self.book.charge("well_management", SEC_PER_FLOP * flops, wall_s)


def _cnv(disc: Discretization, rw, ro, dt):
    scale = dt / (disc.volume * disc.phi0)
    return max(float(np.max(np.abs(rw) * scale)), float(np.max(np.abs(ro) * scale)))


def _newton_fully_implicit(ctx: _Context, old: SimState, dt: float, t: float, stats: StepStats):
    """Returns the converged state or None (non-convergence / change limit)."""
    disc, c = ctx.disc, ctx.controls
    state = old.copy()
    target = None
    for _ in range(c.newton_max):
        w0 = time.perf_counter()
        J, rhs, rw, ro = assemble_system(disc, state, old, dt, t, as_arrays=True)
        w1 = time.perf_counter()
        ctx.charge_assembly(w1 - w0)
        ctx.charge_wells(0.0)
        stats.newton_cycles += 1
        res = _cnv(disc, rw, ro, dt)
        if target is None:
            target = max(NEWTON_TOL * res, RESIDUAL_FLOOR)
        if res <= target:
            return state
        sol = ctx.solve(J, rhs)
        stats.linear_iterations += sol.iterations
        if sol.failed:
            stats.solver_failures += 1
        dp = sol.x[0::2]
        ds = np.clip(sol.x[1::2], -MAX_SAT_UPDATE, MAX_SAT_UPDATE)
        if not (np.all(np.isfinite(dp)) and np.all(np.isfinite(ds))):
            return None
        state.p = state.p + dp
        state.sw = np.clip(state.sw + ds, 0.0, 1.0)
        if (np.max(np.abs(state.p - old.p)) > c.maxchange_press
                or np.max(np.abs(state.sw - old.sw)) > c.maxchange_satur):
            return None
    return None


def _newton_impes(ctx: _Context, old: SimState, dt: float, t: float, stats: StepStats):
    disc, c = ctx.disc, ctx.controls
    p = old.p.copy()
    scale = dt / (disc.volume * disc.phi0)
    converged = False
    target = None
    for _ in range(c.newton_max):
        w0 = time.perf_counter()
        R, J = impes_pressure_residual(disc, p, old, dt, t)
        ctx.charge_assembly(time.perf_counter() - w0)
        ctx.charge_wells(0.0)
        stats.newton_cycles += 1
        res = float(np.max(np.abs(R) * scale))
        if target is None:
            target = max(NEWTON_TOL * res, RESIDUAL_FLOOR)
        if res <= target:
            converged = True
            break
        sol = ctx.solve(J, -R)
        stats.linear_iterations += sol.iterations
        if sol.failed:
            stats.solver_failures += 1
        if not np.all(np.isfinite(sol.x)):
            return None
        p = p + sol.x
        if np.max(np.abs(p - old.p)) > c.maxchange_press:
            return None
    if not converged:
        return None
    fl = disc.fluid
    gw, _ = impes_water_outflow(disc, p, old, t)
    aw_old, _ = accumulation(disc, old)
    pv = disc.volume * disc.phi0 * (1.0 + fl.c_r * (p - fl.p_ref))
    bw = 1.0 + fl.c_w * (p - fl.p_ref)
    sw = (aw_old - dt * gw) / (pv * bw)
    sw = np.clip(sw, 0.0, 1.0)  # overshoot here is where explicit updates lose mass
    if np.max(np.abs(sw - old.sw)) > c.maxchange_satur:
        return None
    return SimState(p, sw)


def solve_timestep(state: SimState, dt: float, ctx: _Context, t: float = 0.0):
    """Advance one timestep, cutting ``dt`` in half on failure.

    Returns ``(new_state, stats)``. Raises :class:`ConvergenceFailure` when
    the cut limit is exhausted or a step fails at ``dt_min``.
    """
    c = ctx.controls
    stats = StepStats()
    while True:
        ctx.book.charge_overhead(SEC_STEP_OVERHEAD)
        stats.attempts.append(dt)
        newton = _newton_impes if ctx.impes else _newton_fully_implicit
        new = newton(ctx, state, dt, t, stats)
        if new is not None:
            stats.dt_used = dt
            stats.max_dp = float(np.max(np.abs(new.p - state.p)))
            stats.max_ds = float(np.max(np.abs(new.sw - state.sw)))
            return new, stats
        if dt <= c.dt_min or stats.cuts >= c.cut_limit:
            raise ConvergenceFailure(
                f"timestep failed at t={t:g} d with dt={dt:g} d after {stats.cuts} cuts", stats
            )
        stats.cuts += 1
        dt = max(dt / 2.0, c.dt_min)


def _event_times(case: SimulationCase) -> tuple[np.ndarray, np.ndarray]:
    h = float(case.horizon_days)
    ri = float(case.report_interval_days)
    reports = list(np.arange(1, int(np.floor(h / ri + 1e-9)) + 1) * ri)
    if not reports or abs(reports[-1] - h) > 1e-9:
        reports.append(h)
    reports = np.array(reports)
    events = set(np.round(reports, 9).tolist())
    for w in case.wells:
        for ctl in w.schedule:
            for b in (ctl.start_day, ctl.end_day):
                if 0 < b < h:
                    events.add(round(float(b), 9))
    return reports, np.array(sorted(events))


def run_simulation(case: SimulationCase, wall_timeout_s: float = np.inf, clock: str = "modeled") -> SimulationResult:
    """March a case from day 0 to its horizon.

    The result status is ``normal``, ``abnormal`` (a step could not be
    completed) or ``timeout`` (the run clock passed ``wall_timeout_s``).
    Counters and curves cover whatever part of the horizon was completed.
    """
    case.validate()
    c = case.controls
    disc = Discretization(case)
    book = Bookkeeper(clock)
    ctx = _Context(disc, c, book)
    reports, events = _event_times(case)
    fl = case.fluid

    state = disc.initial_state()
    aw, ao = accumulation(disc, state)
    ofip = {"water": float(aw.sum()), "oil": float(ao.sum())}
    nwell = len(case.wells)
    cum = {k: np.zeros(nwell) for k in ("oil_prod", "water_prod", "water_inj")}

    days = [0.0]
    records = [_snapshot(cum, aw, ao)]
    counters = RunCounters()
    status, message = "normal", ""
    t = 0.0
    dt = float(np.clip(1.0, c.dt_min, c.dt_max))
    ev = 0
    rep = 0
    steps_fi = 0
    steps_total = 0
    tiny = 1e-9

    while t < case.horizon_days - tiny:
        while ev < events.size and events[ev] <= t + tiny:
            ev += 1
        target = events[ev]
        dt_try = min(dt, target - t)
        truncated = dt_try < dt
        try:
            new, st = solve_timestep(state, dt_try, ctx, t)
        except ConvergenceFailure as exc:
            st = exc.stats
            _accumulate(counters, st, accepted=False)
            status, message = "abnormal", str(exc)
            break
        _accumulate(counters, st, accepted=True)
        steps_total += 1
        steps_fi += 0 if ctx.impes else 1
        # cumulative well volumes over the step, using end-of-step rates
        w0 = time.perf_counter()
        qw, qo = active_well_rates(disc, new, t, lagged_sw=state.sw if ctx.impes else None)
        book.charge("well_management", SEC_PER_FLOP * 50.0 * max(nwell, 1), time.perf_counter() - w0)
        h = st.dt_used
        cum["oil_prod"] += np.maximum(qo, 0.0) * h
        cum["water_prod"] += np.maximum(qw, 0.0) * h
        cum["water_inj"] += np.maximum(-qw, 0.0) * h
        t = t + h
        state = new
        base = dt if (truncated and st.cuts == 0) else h
        dt = select_timestep(float(np.clip(base, c.dt_min, c.dt_max)), st.max_dp, st.max_ds, c)
        if rep < reports.size and t >= reports[rep] - tiny:
            w0 = time.perf_counter()
            aw, ao = accumulation(disc, state)
            days.append(float(reports[rep]))
            records.append(_snapshot(cum, aw, ao))
            book.charge("io", SEC_PER_VALUE_WRITTEN * (2 * disc.n + 3 * nwell + 8), time.perf_counter() - w0)
            rep += 1
        book.memory(ctx.static_bytes)
        if book.elapsed() > wall_timeout_s:
            status, message = "timeout", f"run clock exceeded {wall_timeout_s:g} s at t={t:g} d"
            break

    if days[-1] < t - tiny:
        aw, ao = accumulation(disc, state)
        days.append(float(t))
        records.append(_snapshot(cum, aw, ao))

    names = [w.name for w in case.wells]
    curves = _curves(records, names)
    fip = {
        "oil": np.array([r["fip_oil"] for r in records]),
        "water": np.array([r["fip_water"] for r in records]),
        "gas": np.zeros(len(records)),
    }
    last = records[-1]
    mbe = {
        "oil": _phase_mbe(last["fip_oil"], ofip["oil"], last["oil_prod"].sum(), 0.0),
        "water": _phase_mbe(last["fip_water"], ofip["water"], last["water_prod"].sum(), last["water_inj"].sum()),
        "gas": 0.0,
    }
    elapsed = book.elapsed()
    implicitness = 1.0 if steps_total == 0 else (steps_fi + 0.5 * (steps_total - steps_fi)) / steps_total
    return SimulationResult(
        status=status,
        elapsed_s=float(elapsed),
        cpu_s=float(elapsed),
        memory_peak_mb=float(book.peak_bytes / 1e6),
        counters=counters,
        kernel_timings=dict(book.kernels),
        days=np.array(days),
        curves=curves,
        fip_series=fip,
        mbe=mbe,
        average_implicitness=float(implicitness),
        days_simulated=float(t),
        wall_s=book.wall(),
        clock=clock,
        message=message,
    )


def _phase_mbe(fip, ofip, prod, inj) -> float:
    # a phase that was never present and never entered has nothing to balance
    if ofip == 0 and prod == 0 and inj == 0 and fip == 0:
        return 0.0
    return compute_mbe(fip, ofip, prod, inj)


def _accumulate(counters: RunCounters, st: StepStats, accepted: bool):
    if st is None:
        return
    counters.timesteps += 1 if accepted else 0
    counters.newton_cycles += st.newton_cycles
    counters.linear_iterations += st.linear_iterations
    counters.solver_failures += st.solver_failures
    counters.cuts += st.cuts


def _snapshot(cum, aw, ao):
    return {
        "oil_prod": cum["oil_prod"].copy(),
        "water_prod": cum["water_prod"].copy(),
        "water_inj": cum["water_inj"].copy(),
        "fip_oil": float(ao.sum()),
        "fip_water": float(aw.sum()),
    }


def _curves(records, names):
    curves = {}
    for key in ("oil_prod", "water_prod", "water_inj"):
        curves[f"field_{key}"] = np.array([r[key].sum() for r in records])
    curves["field_gas_prod"] = np.zeros(len(records))
    for k, name in enumerate(names):
        for key in ("oil_prod", "water_prod", "water_inj"):
            curves[f"{name}:{key}"] = np.array([r[key][k] for r in records])
    return curves


def make_context(case: SimulationCase, clock: str = "modeled") -> tuple[Discretization, _Context]:
    """Discretization and solver context for stepping a case by hand."""
    disc = Discretization(case)
    return disc, _Context(disc, case.controls, Bookkeeper(clock))
