"""History matching with and without tuned numerical controls on a small
synthetic ensemble, followed by the speedup report.

    python demos/03_tuned_history_match.py [n_members]
"""
import sys

import numpy as np

from simtune.esmda import AssimilationConfig
from simtune.searchspace import builtin_space
from simtune.synthetic import EnsembleGeneratorSpec, generate_ensemble, sample_members, synthetic_observations
from simtune.tunaflow import WorkflowConfig, baseline_run, coupled_run, run_campaign, speedup_report

n = int(sys.argv[1]) if len(sys.argv) > 1 else 10
spec = EnsembleGeneratorSpec(n_members=n)
problem, ensemble, truth = generate_ensemble(spec)
obs = synthetic_observations(problem, truth, spec.noise_level, seed=1)
space = builtin_space()
engineer = dict(space.defaults(), lin_iter_max=5, dt_max=5.0)
data = run_campaign(problem, sample_members(spec, 4, 100), space, engineer, lhs_n=20, seed=7,
                    group_prefix="c", include_reference=True).dataset

wf = WorkflowConfig(query_size=5000, baseline_mode="engineer", engineer_sample=engineer, seed=11)
cfg = AssimilationConfig(4, seed=3)
tuned = coupled_run(problem, ensemble, obs, cfg, wf, data)
base = baseline_run(problem, ensemble, obs, cfg, wf, data)

rep = speedup_report(tuned.ledger, base.ledger)
print(rep.rounds_csv())
print(rep.bands_csv())


def misfit(D):
    return float(np.mean(((D - obs.d_obs[:, None]) ** 2) / obs.variances[:, None]))


print(f"data misfit, prior {misfit(tuned.esmda.rounds[0].D_sim):.1f} -> forecast tuned "
      f"{misfit(tuned.esmda.forecast):.2f} / baseline {misfit(base.esmda.forecast):.2f}")
print(f"oracle refit sizes: {tuned.ledger.refit_sizes}")
