"""Acceptance checks. Each test prints one ``[Cn] PASS|FAIL`` line with the
measured values and its wall time, then asserts the criterion.

Run ``pytest tests/test_acceptance.py -v`` (lines are printed even when
output is captured) or ``python tests/test_acceptance.py``.
"""
import time

import numpy as np
import pytest

from simtune.esmda import AssimilationConfig, EnsembleState, ObservationSet, cross_covariance, kalman_gain
from simtune.esmda import run_esmda, update_ensemble
from simtune.oracle import CVConfig, Dataset, DatasetRow, DatasetSchema, PipelineSpec, logo_cv, logo_splits
from simtune.searchspace import ParameterDef, SearchSpace, builtin_space, lhs_sample
from simtune.simkernel import Discretization, NumericalControls, SimState, assemble_system, quarter_five_spot
from simtune.simkernel import reference_case, run_simulation
from simtune.simkernel.assemble import residual_vector
from simtune.synthetic import EnsembleGeneratorSpec, generate_ensemble, sample_members, synthetic_observations
from simtune.tunaflow import (
    WorkflowConfig,
    baseline_run,
    coupled_run,
    ledger_digest,
    run_campaign,
    speedup_report,
    weighted_elapsed_time,
)


@pytest.fixture
def emit(capsys):
    def _emit(tag, ok, detail, t0, note=None):
        with capsys.disabled():
            print(f"\n[{tag}] {'PASS' if ok else 'FAIL'} {detail} ({time.perf_counter() - t0:.1f} s)")
            if note:
                print(f"      note: {note}")
    return _emit


# C1 ------------------------------------------------------------------------

def test_c1_linear_gaussian_posterior(emit):
    t0 = time.perf_counter()
    d_obs = 2.0  # prior N(0,1), G = 1, noise N(0,1): posterior N(1, 0.5)
    mean_true, var_true = 1.0, 0.5
    errs = []
    for seed in range(5):
        M0 = np.random.default_rng(seed).standard_normal((1, 2000))
        state, _ = run_esmda(EnsembleState(M0, ["m"]), ObservationSet([d_obs], [1.0]),
                             AssimilationConfig(4, [4, 4, 4, 4], seed=seed + 1), lambda c: c.M.copy())
        m = state.M[0]
        errs.append((abs(m.mean() - mean_true) / mean_true, abs(m.var(ddof=1) - var_true) / var_true))
    errs = np.array(errs)
    elapsed = time.perf_counter() - t0
    ok = bool(np.all(errs <= 0.05)) and elapsed < 30
    emit("C1", ok, f"max rel. error mean={errs[:, 0].max():.4f} var={errs[:, 1].max():.4f} over seeds 0-4 "
         f"(tol 0.05)", t0)
    assert ok


# C2 ------------------------------------------------------------------------

def test_c2_two_member_update(emit):
    t0 = time.perf_counter()
    M = np.array([[0.0, 2.0]])
    D = np.array([[0.0, 2.0]])
    K = kalman_gain(*cross_covariance(M, D), [1.0], 1.0)
    M2 = update_ensemble(M, D, np.array([[3.0, 3.0]]), K)
    dk = abs(K[0, 0] - 2 / 3)
    dm = np.max(np.abs(M2[0] - [2.0, 8 / 3]))
    ok = dk <= 1e-15 and dm <= 1e-15 and time.perf_counter() - t0 < 1
    emit("C2", ok, f"K={float(K[0, 0])!r} M'=[{float(M2[0, 0])!r}, {float(M2[0, 1])!r}] "
         f"|dK|={dk:.1e} |dM|={dm:.1e}", t0)
    assert ok


# C3 ------------------------------------------------------------------------

def test_c3_conservation_reference_case(emit):
    t0 = time.perf_counter()
    r = run_simulation(reference_case(NumericalControls(solver_kind="direct", lin_tol=1e-10, dt_max=1.0)))
    worst = max(abs(v) for v in r.mbe.values())
    elapsed = time.perf_counter() - t0
    ok = r.status == "normal" and worst <= 1e-4 and elapsed < 10
    emit("C3", ok, f"status={r.status} max |MBE|={worst:.2e} % (tol 1e-4 %)", t0)
    assert ok


# C4 ------------------------------------------------------------------------

def test_c4_jacobian_vs_central_differences(emit):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        case = quarter_five_spot(nx=3, ny=3, perm=rng.uniform(10, 500, 9), horizon=10, report=10)
        disc = Discretization(case)
        st = SimState(rng.uniform(150, 250, 9), rng.uniform(0.15, 0.85, 9))
        old = SimState(st.p + rng.normal(0, 5, 9), np.clip(st.sw + rng.normal(0, 0.05, 9), 0.12, 0.88))
        dt = rng.uniform(0.5, 20.0)
        J = assemble_system(disc, st, old, dt, 0.0)[0].toarray()
        x = np.empty(18)
        x[0::2], x[1::2] = st.p, st.sw
        F = np.empty_like(J)
        for j in range(18):
            h = 1e-6 * max(1.0, abs(x[j]))
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            F[:, j] = (residual_vector(disc, SimState(xp[0::2], xp[1::2]), old, dt, 0.0)
                       - residual_vector(disc, SimState(xm[0::2], xm[1::2]), old, dt, 0.0)) / (2 * h)
        worst = max(worst, np.max(np.abs(J - F)) / np.max(np.abs(F)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and elapsed < 10
    emit("C4", ok, f"max relative error {worst:.2e} over 20 random states (tol 1e-5)", t0)
    assert ok


# C5 ------------------------------------------------------------------------

def test_c5_wet_branches(emit):
    t0 = time.perf_counter()
    got = [weighted_elapsed_time(100, m) for m in (0.03, 0.07, 0.20, 0.05, 0.10)]
    ok = got == [100, 200, 100000, 100, 200]
    emit("C5", ok, f"WET(100, 0.03/0.07/0.20/0.05/0.10) = {got}", t0)
    assert ok


# C6 ------------------------------------------------------------------------

def _random_space(rng) -> SearchSpace:
    params = []
    for i in range(int(rng.integers(1, 7))):
        kind = ["real", "log_real", "integer", "categorical"][int(rng.integers(4))]
        if kind == "real":
            lo = rng.uniform(-10, 10)
            hi = lo + rng.uniform(1e-3, 20)
            params.append(ParameterDef(f"p{i}", kind, (lo, hi), lo))
        elif kind == "log_real":
            lo = 10 ** rng.uniform(-8, 2)
            hi = lo * 10 ** rng.uniform(0.1, 6)
            params.append(ParameterDef(f"p{i}", kind, (lo, hi), lo))
        elif kind == "integer":
            lo = int(rng.integers(-5, 5))
            hi = lo + int(rng.integers(1, 200))
            params.append(ParameterDef(f"p{i}", kind, (lo, hi), lo))
        else:
            cats = [f"c{k}" for k in range(int(rng.integers(2, 7)))]
            params.append(ParameterDef(f"p{i}", kind, cats, cats[0]))
    return SearchSpace(params)


def test_c6_lhs_stratification(emit):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    bad = []
    kinds_seen = set()
    for trial in range(200):
        space = _random_space(rng)
        n = int(rng.integers(1, 101))
        samples = lhs_sample(space, n, seed=trial)
        for p in space.params:
            kinds_seen.add(p.kind)
            vals = [s[p.name] for s in samples]
            if p.kind in ("real", "log_real"):
                strata = np.floor(np.array([p.to_unit(v) for v in vals]) * n).astype(int)
                strata = np.minimum(strata, n - 1)
                if sorted(strata.tolist()) != list(range(n)):
                    bad.append((trial, p.name))
            elif p.kind == "categorical":
                counts = [vals.count(c) for c in p.domain]
                if max(counts) - min(counts) > 1:
                    bad.append((trial, p.name))
    elapsed = time.perf_counter() - t0
    ok = not bad and kinds_seen == {"real", "log_real", "integer", "categorical"} and elapsed < 30
    emit("C6", ok, f"200 random spaces, n in 1..100, kinds {sorted(kinds_seen)}: {len(bad)} violations", t0)
    assert ok


# C7 ------------------------------------------------------------------------

def test_c7_logo_no_leakage(emit):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    space = SearchSpace([ParameterDef("a", "real", (0.0, 1.0), 0.5)])
    schema = DatasetSchema(["f0"], space.encoded_names(), space.to_json())
    grid = [CVConfig("knn", {"n_neighbors": 1, "p": 2}, PipelineSpec("standardize", 1.0))]
    problems = []
    for G in range(2, 17):
        n = int(rng.integers(2 * G, 8 * G))
        groups = [f"g{k}" for k in range(G)] + [f"g{int(k)}" for k in rng.integers(0, G, n - G)]
        rng.shuffle(groups)
        splits = logo_splits(groups)
        g = np.array(groups)
        for _, tr, va in splits:
            if set(g[tr]) & set(g[va]) or len(set(g[va])) != 1 or len(tr) + len(va) != n:
                problems.append(G)
        rows = [DatasetRow(gr, rng.random(1), rng.random(1), 1.0 + rng.random(), 0.0, 0.0, 0.0, timesteps=3)
                for gr in groups]
        report, _ = logo_cv(Dataset(schema, rows), grid)
        if len(splits) != G or len(report.splits) != G or not report.leakage_free():
            problems.append(G)
    ok = not problems
    emit("C7", ok, f"G = 2..16: split count == G and empty train/validation group overlap; failures {problems}", t0)
    assert ok


# C8 ------------------------------------------------------------------------

def test_c8_forest_learns_smooth_runtime(emit):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    space = SearchSpace([ParameterDef(f"x{i}", "real", (0.0, 1.0), 0.5) for i in range(4)])
    schema = DatasetSchema(["group_size"], space.encoded_names(), space.to_json())
    rows = []
    for k in range(2000):
        x = rng.random(4)
        et = 1.0 + 2.0 * x[0] + np.exp(x[1]) + np.sin(np.pi * x[2]) + x[3] ** 2
        et *= 1.0 + 0.05 * rng.standard_normal()
        rows.append(DatasetRow(f"g{k % 16}", np.array([1.0]), x, et, 0.0, 0.0, 0.0, timesteps=10))
    grid = [CVConfig("forest", {"n_estimators": 100, "max_features": "all", "criterion": "mse", "max_depth": None},
                     PipelineSpec("standardize", 1.0))]
    report, _ = logo_cv(Dataset(schema, rows), grid, seed=8)
    mape = report.mean(0, "val")[0]
    elapsed = time.perf_counter() - t0
    ok = mape <= 20.0 and elapsed < 300
    emit("C8", ok, f"forest LOGO validation MAPE {mape:.2f} % on 2000 rows, 16 groups (tol 20 %)", t0)
    assert ok


# C9 / C11 ------------------------------------------------------------------

HM_SPEC = EnsembleGeneratorSpec(seed=0, n_members=20)
ENGINEER = dict(builtin_space().defaults(), lin_iter_max=5, dt_max=5.0)


def _hm_setup():
    problem, ensemble, truth = generate_ensemble(HM_SPEC)
    obs = synthetic_observations(problem, truth, HM_SPEC.noise_level, seed=1)
    # prior corpus from independent draws of the same geology
    camp = run_campaign(problem, sample_members(HM_SPEC, 8, 100), builtin_space(), ENGINEER, lhs_n=25, seed=7,
                        group_prefix="c", include_reference=True)
    return problem, ensemble, obs, camp.dataset


def _hm_runs(workers: int):
    problem, ensemble, obs, data = _hm_setup()
    wf = WorkflowConfig(query_size=10_000, baseline_mode="engineer", engineer_sample=ENGINEER, seed=11,
                        workers=workers)
    cfg = AssimilationConfig(5, seed=3)
    tuned = coupled_run(problem, ensemble, obs, cfg, wf, data)
    base = baseline_run(problem, ensemble, obs, cfg, wf, data)
    return tuned, base


@pytest.fixture(scope="module")
def hm_runs():
    t0 = time.perf_counter()
    tuned, base = _hm_runs(workers=1)
    return tuned, base, time.perf_counter() - t0


def test_c9_end_to_end_tuning_gain(emit, hm_runs):
    t0 = time.perf_counter()
    tuned, base, runtime = hm_runs
    rep = speedup_report(tuned.ledger, base.ledger)
    rounds = [2, 3, 4, 5]
    red = rep.reduction(rounds)
    worst_mbe = max(e.mean_abs_mbe for e in tuned.ledger.entries)
    counts = (len(tuned.ledger.entries), len(base.ledger.entries))
    ok = red >= 0.10 and worst_mbe <= 0.10 and counts == (120, 120) and runtime < 900
    emit("C9", ok, f"rounds 2-5 mean elapsed tuned {rep.mean_elapsed('tuned', rounds):.4g} s vs baseline "
         f"{rep.mean_elapsed('baseline', rounds):.4g} s: reduction {100 * red:.1f} % (need >= 10 %); "
         f"max tuned mean |MBE| {worst_mbe:.2e} % (need <= 0.10); simulations per arm {counts}; "
         f"both arms {runtime:.0f} s", t0 - runtime)
    assert ok


def test_c11_determinism_across_worker_counts(emit, hm_runs):
    t0 = time.perf_counter()
    tuned, base, _ = hm_runs
    tuned2, base2 = _hm_runs(workers=2)
    same_ledgers = (ledger_digest(tuned.ledger) == ledger_digest(tuned2.ledger)
                    and ledger_digest(base.ledger) == ledger_digest(base2.ledger))
    same_samples = [e.sample for e in tuned.ledger.entries] == [e.sample for e in tuned2.ledger.entries]
    same_final = np.array_equal(tuned.final.M, tuned2.final.M) and np.array_equal(base.final.M, base2.final.M)
    ok = same_ledgers and same_samples and same_final
    emit("C11", ok, f"workers 1 vs 2: ledgers equal={same_ledgers}, chosen samples equal={same_samples}, "
         f"final ensembles equal={same_final}", t0)
    assert ok


# C10 -----------------------------------------------------------------------

COUNT_SPEC = dict(seed=5, nx=4, ny=4, horizon_days=40, report_days=10, inj_rate=10)


def _count(n_members: int, n_assim: int) -> tuple[int, int]:
    problem, ensemble, truth = generate_ensemble(EnsembleGeneratorSpec(n_members=n_members, **COUNT_SPEC))
    obs = synthetic_observations(problem, truth, 0.05, seed=1)
    wf = WorkflowConfig(query_size=50, baseline_mode="engineer", engineer_sample=ENGINEER, seed=2,
                        oracle=CVConfig("tree", {"criterion": "mse", "max_depth": 8}, PipelineSpec("standardize", 1.0)))
    cfg = AssimilationConfig(n_assim, seed=3)
    tuned = coupled_run(problem, ensemble, obs, cfg, wf)
    base = baseline_run(problem, ensemble, obs, cfg, wf)
    return len(tuned.ledger.entries), len(base.ledger.entries)


@pytest.mark.xfail(strict=True, reason="250/240 requires N_a + 1 = 5 simulated rounds, which contradicts the "
                                       "N_a + 1 = 6 rounds that C9's 120 = 20 x 6 fixes for N_a = 5")
def test_c10_simulation_counts(emit):
    t0 = time.perf_counter()
    got = {n: _count(n, 5) for n in (50, 48)}
    with_four = {n: _count(n, 4) for n in (50, 48)}
    ok = got[50] == (250, 250) and got[48] == (240, 240)
    emit("C10", ok, f"N_a=5: N_r=50 -> {got[50][0]} tuned / {got[50][1]} baseline simulations (need 250); "
         f"N_r=48 -> {got[48][0]} / {got[48][1]} (need 240)", t0,
         note=f"N_a=4 (four updates plus the forecast round) gives {with_four[50]} and {with_four[48]}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
