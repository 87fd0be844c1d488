"""Run one reservoir model under two sets of numerical controls and look at
what the log feature vector records about each run.

    python demos/01_controls_and_features.py
"""
from simtune.logfeat import derived_metrics, emit_log, feature_names, features_from_result
from simtune.searchspace import builtin_space, to_controls
from simtune.synthetic import EnsembleGeneratorSpec, generate_ensemble
from simtune.simkernel import run_simulation

problem, ensemble, _ = generate_ensemble(EnsembleGeneratorSpec(n_members=2))
space = builtin_space()
setups = {
    "defaults": space.defaults(),
    "tight linear cap": dict(space.defaults(), lin_iter_max=5, dt_max=5.0),
    "direct + rcm": dict(space.defaults(), solver_kind="direct", ordering="rcm", dt_max=30.0),
}

for label, sample in setups.items():
    case = problem.build_case(ensemble.M[:, 0], to_controls(sample))
    result = run_simulation(case)
    fv = features_from_result(result, case)
    ni_ts, li_ni = derived_metrics(fv)
    print(f"{label:>16}: {result.status}, elapsed {result.elapsed_s:.4f} s, {result.counters.timesteps} steps, "
          f"{result.counters.cuts} cuts, NI/TS {ni_ts:.2f}, LI/NI {li_ni:.2f}, mean |MBE| {result.mean_abs_mbe:.1e} %")

print(f"\nfeature vector length: {len(feature_names())}")
print("first log lines:")
print("".join(emit_log(result, case).to_text().splitlines(True)[:6]))
