"""Build a small training campaign, grid-search an oracle with
leave-one-group-out CV and query it for one realization.

    python demos/02_train_oracle.py
"""
from simtune.oracle import logo_cv, make_grid
from simtune.searchspace import builtin_space
from simtune.synthetic import EnsembleGeneratorSpec, generate_ensemble, sample_members
from simtune.tunaflow import query_oracle, run_campaign
from simtune.logfeat import features_from_result
from simtune.searchspace import to_controls
from simtune.simkernel import run_simulation

spec = EnsembleGeneratorSpec(n_members=4)
problem, ensemble, _ = generate_ensemble(spec)
space = builtin_space()
engineer = dict(space.defaults(), lin_iter_max=5, dt_max=5.0)

camp = run_campaign(problem, sample_members(spec, 6, 42), space, engineer, lhs_n=15, seed=1, group_prefix="c",
                    include_reference=True)
print(f"campaign: {len(camp.dataset)} clean rows, discarded {camp.discarded}")

grid = make_grid(["tree", "knn"], ["standardize"], [1.0, 0.8],
                 overrides={"tree": {"max_depth": [4, 8]}, "knn": {"n_neighbors": [2, 4]}})
report, oracle = logo_cv(camp.dataset, grid)
print(report.summary_csv())
print(f"best: {report.best.label()}")

case = problem.build_case(ensemble.M[:, 0], to_controls(engineer))
features = features_from_result(run_simulation(case), case)
q = query_oracle(oracle, features, space, 2000, seed=0)
print(f"predicted best: {q.best.elapsed_s:.4f} s (mean |MBE| {q.best.mean_abs_mbe:.1e} %), bands {q.band_counts}")
print(q.best.sample)
