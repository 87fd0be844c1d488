import numpy as np
import pytest
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from simtune.simkernel import (
    DARCY,
    ConvergenceFailure,
    Discretization,
    FluidModel,
    GridModel,
    InvalidCaseError,
    NumericalControls,
    SimState,
    SimulationCase,
    StructurallySingularError,
    WellControl,
    WellSpec,
    assemble_system,
    compute_mbe,
    darcy_pair_case,
    harmonic_transmissibility,
    linear_solve,
    make_context,
    ordering_permutation,
    quarter_five_spot,
    reference_case,
    run_simulation,
    select_timestep,
    solve_timestep,
    table_from_csv,
    table_to_csv,
)
from simtune.simkernel.assemble import residual_vector
from simtune.simkernel.linsolve import gmres

DIRECT = NumericalControls(solver_kind="direct", ordering="rcm")


def small_case(n=6, horizon=60.0, controls=None, seed=3):
    from simtune.simkernel import lognormal_field

    return quarter_five_spot(nx=n, ny=n, perm=lognormal_field(n, n, rng=seed), horizon=horizon,
                             report=horizon / 4, controls=controls or DIRECT)


# run_simulation ------------------------------------------------------------

def test_darcy_pair_pressure_drop():
    q, k, mu, length, area = 10.0, 100.0, 1.0, 10.0, 10.0
    case = darcy_pair_case(q=q, k=k, mu_w=mu, length=length, area=area)
    disc, ctx = make_context(case)
    new, stats = solve_timestep(disc.initial_state(), 1.0, ctx)
    expected = q * mu * length / (DARCY * k * area)
    assert abs((new.p[0] - new.p[1]) - expected) <= 1e-8 * expected
    assert stats.cuts == 0


def test_no_wells_gives_zero_production_and_mbe():
    grid = GridModel(nx=3, ny=3, dx=10, dy=10, dz=5, perm_x=50.0, perm_y=50.0, porosity=0.2)
    case = SimulationCase(grid, FluidModel(), [], DIRECT, horizon_days=30.0, report_interval_days=30.0)
    r = run_simulation(case)
    assert r.status == "normal"
    for name, series in r.curves.items():
        assert np.all(series == 0), name
    assert r.mbe == {"oil": 0.0, "water": 0.0, "gas": 0.0}


def test_determinism_on_reference_case():
    ctl = NumericalControls(solver_kind="direct", dt_max=30.0)
    a = run_simulation(reference_case(ctl))
    b = run_simulation(reference_case(ctl))
    assert a.counters == b.counters
    assert a.elapsed_s == b.elapsed_s  # modeled clock
    for name in a.curves:
        assert np.array_equal(a.curves[name], b.curves[name])


def test_run_accounting_and_bounds():
    ctl = NumericalControls(lin_iter_max=40, ordering="natural")
    r = run_simulation(small_case(controls=ctl))
    c = r.counters
    assert r.status == "normal"
    assert c.newton_cycles >= c.timesteps > 0
    assert c.linear_iterations >= c.newton_cycles - c.timesteps  # converged checks need no solve
    assert sum(r.kernel_timings.values()) <= r.elapsed_s + 1e-12
    assert r.mbe["gas"] == 0.0
    assert r.average_implicitness == 1.0
    assert r.days_simulated == pytest.approx(60.0)


def test_saturation_stays_in_unit_interval():
    case = small_case(controls=NumericalControls(solver_kind="direct", maxchange_satur=0.9, norm_satur=0.3))
    disc, ctx = make_context(case)
    state = disc.initial_state()
    t, dt = 0.0, 1.0
    while t < 40.0:
        state, st = solve_timestep(state, dt, ctx, t)
        t += st.dt_used
        assert state.sw.min() >= -1e-9 and state.sw.max() <= 1 + 1e-9
        dt = select_timestep(st.dt_used, st.max_dp, st.max_ds, case.controls)


def test_impes_lowers_implicitness():
    ctl = NumericalControls(solver_kind="direct", formulation="impes", maxchange_satur=0.5, norm_satur=0.3)
    r = run_simulation(small_case(controls=ctl))
    assert r.status == "normal"
    assert r.average_implicitness < 1.0
    fi = run_simulation(small_case())
    assert fi.mean_abs_mbe <= 1e-6


def test_timeout_status_keeps_partial_progress():
    r = run_simulation(small_case(horizon=120.0), wall_timeout_s=1e-4)
    assert r.status == "timeout"
    assert 0 < r.days_simulated < 120.0
    assert r.counters.timesteps >= 1


def test_abnormal_when_cuts_exhausted():
    ctl = NumericalControls(solver_kind="direct", dt_min=0.5, maxchange_press=15, norm_press=10,
                            maxchange_satur=0.1, ncuts_max=1)
    case = small_case(controls=ctl)
    case.wells[0].schedule[0].target *= 50
    r = run_simulation(case)
    assert r.status == "abnormal"
    assert r.message


def test_invalid_case_rejected_before_stepping():
    case = small_case()
    case.controls = NumericalControls(dt_min=10.0, dt_max=5.0)
    with pytest.raises(InvalidCaseError):
        run_simulation(case)


def test_case_json_and_curve_csv_round_trip():
    case = small_case()
    again = SimulationCase.from_json(case.to_json())
    assert again.to_json() == case.to_json()
    r = run_simulation(case)
    days, series = table_from_csv(r.curves_csv())
    assert np.array_equal(days, r.days)
    for name in r.curves:
        assert np.array_equal(series[name], r.curves[name])
    assert table_to_csv(days, series) == r.curves_csv()


# select_timestep -----------------------------------------------------------

def test_select_timestep_examples():
    c = NumericalControls()
    assert select_timestep(10.0, c.norm_press, c.norm_satur / 2, c) == 10.0
    assert select_timestep(10.0, 1e-9, 1e-9, c) == 20.0
    assert select_timestep(c.dt_max, 1e-9, 1e-9, c) == c.dt_max
    assert select_timestep(c.dt_min, 1e6, 1.0, c) == c.dt_min


# solve_timestep ------------------------------------------------------------

def test_steady_state_converges_in_one_cycle():
    grid = GridModel(nx=2, ny=2, dx=10, dy=10, dz=5, perm_x=10.0, perm_y=10.0, porosity=0.2)
    case = SimulationCase(grid, FluidModel(), [], DIRECT, horizon_days=10.0, report_interval_days=10.0)
    disc, ctx = make_context(case)
    _, st = solve_timestep(disc.initial_state(), 5.0, ctx)
    assert st.newton_cycles == 1 and st.cuts == 0


def test_forced_cut_halves_dt():
    case = small_case(controls=NumericalControls(solver_kind="direct", maxchange_press=15, norm_press=10))
    disc, ctx = make_context(case)
    _, st = solve_timestep(disc.initial_state(), 8.0, ctx)
    assert st.cuts >= 1
    assert st.attempts[:2] == [8.0, 4.0]
    assert st.dt_used == 8.0 / 2**st.cuts


def test_convergence_failure_at_dt_min():
    ctl = NumericalControls(solver_kind="direct", dt_min=1.0, dt_max=1.0, maxchange_press=15, norm_press=10)
    case = small_case(controls=ctl)
    case.wells[0].schedule[0].target *= 100
    disc, ctx = make_context(case)
    with pytest.raises(ConvergenceFailure):
        solve_timestep(disc.initial_state(), 1.0, ctx)


def test_direct_and_iterative_agree():
    base = dict(lin_tol=1e-10, lin_iter_max=500, north_restart=60, dt_max=10.0)
    a = small_case(controls=NumericalControls(solver_kind="direct", **base))
    b = small_case(controls=NumericalControls(solver_kind="iterative", **base))
    da, ca = make_context(a)
    db, cb = make_context(b)
    sa, _ = solve_timestep(da.initial_state(), 5.0, ca)
    sb, _ = solve_timestep(db.initial_state(), 5.0, cb)
    assert np.max(np.abs(sa.p - sb.p) / np.abs(sa.p)) <= 1e-6


# linear_solve --------------------------------------------------------------

@pytest.mark.parametrize("kind", ["direct", "iterative"])
def test_identity_solve(kind):
    b = np.arange(1.0, 6.0)
    sol = linear_solve(sp.identity(5, format="csr"), b, NumericalControls(solver_kind=kind))
    assert np.allclose(sol.x, b)
    assert sol.iterations == 1 and not sol.failed


@pytest.mark.parametrize("kind", ["direct", "iterative"])
def test_spd_two_by_two(kind):
    ctl = NumericalControls(solver_kind=kind, ordering="natural")
    sol = linear_solve(sp.csr_matrix([[4.0, 1.0], [1.0, 3.0]]), np.array([1.0, 2.0]), ctl)
    assert np.allclose(sol.x, [1 / 11, 7 / 11], rtol=ctl.lin_tol)
    assert not sol.failed


def test_iteration_cap_flags_failure():
    rng = np.random.default_rng(0)
    n = 50
    main = np.logspace(0, 8, n)
    A = sp.diags([main, rng.uniform(-1, 1, n - 1) * main[:-1], rng.uniform(-1, 1, n - 1) * main[1:]],
                 [0, 1, -1], format="csr")
    A = A + sp.csr_matrix(rng.uniform(-1e3, 1e3, (n, n)) * (rng.random((n, n)) < 0.1))
    ctl = NumericalControls(lin_iter_max=1, ordering="natural")
    sol = linear_solve(A, rng.normal(size=n), ctl)
    assert sol.failed and sol.iterations == 1


def test_structurally_singular_is_a_hard_error():
    A = sp.csr_matrix(np.array([[1.0, 2.0, 0.0], [3.0, 4.0, 0.0], [5.0, 6.0, 0.0]]))
    for kind in ("direct", "iterative"):
        with pytest.raises(StructurallySingularError):
            linear_solve(A, np.ones(3), NumericalControls(solver_kind=kind))


@pytest.mark.parametrize("ordering", ["natural", "red-black", "rcm"])
@pytest.mark.parametrize("pivot", ["off", "on"])
def test_gmres_matches_sparse_lu_on_simulator_matrix(ordering, pivot):
    case = small_case(n=5)
    disc = Discretization(case)
    st = disc.initial_state()
    J, rhs, _, _ = assemble_system(disc, st, st, 3.0, 0.0)
    ref = spsolve(J.tocsc(), rhs)
    ctl = NumericalControls(ordering=ordering, pivot_stab=pivot, lin_tol=1e-10, lin_iter_max=400)
    sol = linear_solve(J, rhs, ctl, block_size=2)
    assert not sol.failed
    assert np.allclose(sol.x, ref, rtol=1e-6, atol=1e-9 * np.abs(ref).max())


def test_unpreconditioned_gmres_on_random_system():
    rng = np.random.default_rng(2)
    A = sp.csr_matrix(np.eye(30) * 10 + rng.normal(size=(30, 30)))
    b = rng.normal(size=30)
    x, its, ok, work = gmres(A, b, None, restart=10, tol=1e-10, maxiter=300)
    assert ok and its > 10 and work > 0
    assert np.allclose(A @ x, b, atol=1e-8)


def test_red_black_ordering_is_a_checkerboard():
    case = small_case(n=4)
    disc = Discretization(case)
    probe = disc.pattern_p.matrix(np.ones(disc.pattern_p.order.size))
    perm = ordering_permutation(probe, "red-black")
    first = perm[: 8]
    i, j = first % 4, first // 4
    assert len(set(((i + j) % 2).tolist())) == 1
    for name in ("red-black", "rcm"):
        fi = ordering_permutation(disc.pattern_fi.matrix(np.ones(disc.pattern_fi.order.size)), name, 2)
        assert sorted(fi.tolist()) == list(range(32))
        assert np.all(fi[1::2] == fi[0::2] + 1)


# compute_mbe ---------------------------------------------------------------

def test_compute_mbe_examples():
    assert compute_mbe(100, 100, 10, 10) == 0.0
    assert compute_mbe(99, 100, 2, 2) == pytest.approx(-1.0)
    with pytest.raises(ZeroDivisionError):
        compute_mbe(1.0, 5.0, 5.0, 0.0)


# assemble_system -----------------------------------------------------------

def test_harmonic_transmissibility_limits():
    t_equal = harmonic_transmissibility(80.0, 80.0, 10.0, 10.0, 4.0)
    assert t_equal == pytest.approx(DARCY * 80.0 * 4.0 / 10.0)
    t_contrast = harmonic_transmissibility(1.0, 1e12, 10.0, 10.0, 4.0)
    assert t_contrast == pytest.approx(2 * DARCY * 1.0 * 4.0 / 10.0, rel=1e-9)


def test_jacobian_matches_central_differences():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        case = quarter_five_spot(nx=3, ny=3, perm=rng.uniform(10, 500, 9), horizon=10, report=10)
        disc = Discretization(case)
        st = SimState(rng.uniform(150, 250, 9), rng.uniform(0.15, 0.85, 9))
        old = SimState(st.p + rng.normal(0, 5, 9), np.clip(st.sw + rng.normal(0, 0.05, 9), 0.12, 0.88))
        dt = rng.uniform(0.5, 20.0)
        J, _, _, _ = assemble_system(disc, st, old, dt, 0.0)
        J = J.toarray()
        x = np.empty(18)
        x[0::2], x[1::2] = st.p, st.sw
        F = np.empty_like(J)
        for j in range(18):
            h = 1e-6 * max(1.0, abs(x[j]))
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            rp = residual_vector(disc, SimState(xp[0::2], xp[1::2]), old, dt, 0.0)
            rm = residual_vector(disc, SimState(xm[0::2], xm[1::2]), old, dt, 0.0)
            F[:, j] = (rp - rm) / (2 * h)
        worst = max(worst, np.max(np.abs(J - F)) / np.max(np.abs(F)))
    assert worst <= 1e-5


def test_assembled_residual_matches_reference_residual():
    case = small_case(n=4)
    disc = Discretization(case)
    st = disc.initial_state()
    st.sw = np.linspace(0.1, 0.8, disc.n)
    old = SimState(st.p - 1.0, st.sw.copy())
    _, mr, _, _ = assemble_system(disc, st, old, 2.0, 0.0)
    assert np.allclose(-mr, residual_vector(disc, st, old, 2.0, 0.0), rtol=1e-12, atol=1e-12)


def test_sparsity_is_five_point():
    case = small_case(n=4)
    disc = Discretization(case)
    st = disc.initial_state()
    J, _, _, _ = assemble_system(disc, st, st, 1.0, 0.0)
    blocks = sp.csr_matrix((np.ones(J.nnz), J.indices, J.indptr), shape=J.shape)
    per_cell = np.diff(blocks.indptr)[0::2] // 2
    assert per_cell.max() == 5 and per_cell.min() == 3


def test_well_schedule_rejects_overlap():
    grid = GridModel(nx=2, ny=1, dx=1, dy=1, dz=1, perm_x=1.0, perm_y=1.0, porosity=0.2)
    well = WellSpec("W", 0, "producer", 1.0, [WellControl(0, 5, "rate", 1.0), WellControl(4, 10, "rate", 1.0)])
    case = SimulationCase(grid, FluidModel(), [well], DIRECT, horizon_days=10, report_interval_days=5)
    with pytest.raises(InvalidCaseError):
        case.validate()
