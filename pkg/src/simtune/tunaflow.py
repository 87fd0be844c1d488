"""History matching with oracle-tuned numerical controls.

Round 1 runs every realization with the baseline configuration. Before
each later round (including the final forecast) the oracle is refit on all
runs so far plus the initial dataset, then queried per realization with
that realization's previous-round features; the configuration with the
lowest weighted elapsed time (WET) is used for the round.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .esmda import AssimilationConfig, EnsembleState, EsmdaLedger, ForwardContext, ForwardFailure, ObservationSet
from .esmda import run_esmda
from .logfeat import FeatureVector, features_from_result
from .oracle import CVConfig, Dataset, DatasetSchema, PipelineSpec, clean_dataset, make_row, train
from .searchspace import ConfigSample, SearchSpace, builtin_space, encode_many, lhs_sample, oat_plan, to_controls
from .searchspace import validate as validate_sample
from .simkernel import run_simulation

WET_BANDS = ("x1", "x2", "x1000")
DEFAULT_ORACLE = CVConfig("forest", {"n_estimators": 50, "max_features": "all", "criterion": "mse", "max_depth": None},
                          PipelineSpec("standardize", 1.0))


class WorkflowError(RuntimeError):
    """A run aborted; ``ledger`` holds every entry recorded before the failure."""

    def __init__(self, message: str, ledger: "RunLedger"):
        super().__init__(message)
        self.ledger = ledger


@dataclass
class WorkflowConfig:
    query_size: int = 10_000
    t1: float = 0.05
    t2: float = 0.10
    penalty2: float = 2.0
    penalty3: float = 1000.0
    baseline_mode: str = "default"  # or "engineer"
    engineer_sample: ConfigSample | None = None
    engineer_elapsed: dict[int, float] | None = None  # known engineer runtimes per realization
    timeout_factor: float = 2.0
    round1_timeout_s: float | None = None
    seed: int = 0
    workers: int = 1
    oracle: CVConfig = DEFAULT_ORACLE

    def __post_init__(self):
        if not 0 < self.t1 < self.t2:
            raise ValueError("need 0 < t1 < t2")
        if self.query_size < 1:
            raise ValueError("query_size must be at least 1")
        if self.baseline_mode not in ("default", "engineer"):
            raise ValueError("baseline_mode is 'default' or 'engineer'")
        if self.baseline_mode == "engineer" and self.engineer_sample is None:
            raise ValueError("engineer mode needs an engineer sample")

    def baseline_sample(self, space: SearchSpace) -> ConfigSample:
        if self.baseline_mode == "engineer":
            s = dict(self.engineer_sample)
            problems = validate_sample(s, space)
            if problems:
                raise ValueError("engineer sample: " + "; ".join(problems))
            return s
        return space.defaults()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["oracle"] = {"kind": self.oracle.kind, "hyper": self.oracle.hyper, "pipeline": self.oracle.pipeline.to_dict()}
        return d


def weighted_elapsed_time(et: float, mean_abs_mbe: float, t1: float = 0.05, t2: float = 0.10,
                          penalty2: float = 2.0, penalty3: float = 1000.0) -> float:
    """Elapsed time times the MBE-band penalty (band edges belong to the lower band)."""
    if mean_abs_mbe <= t1:
        return et
    if mean_abs_mbe <= t2:
        return et * penalty2
    return et * penalty3


def wet_band(mean_abs_mbe: float, t1: float = 0.05, t2: float = 0.10) -> str:
    return WET_BANDS[0] if mean_abs_mbe <= t1 else WET_BANDS[1] if mean_abs_mbe <= t2 else WET_BANDS[2]


@dataclass
class CandidateScore:
    sample: ConfigSample
    elapsed_s: float
    mean_abs_mbe: float
    wet: float
    index: int = 0


@dataclass
class QueryResult:
    best: CandidateScore
    ranking: np.ndarray  # candidate indices, best first
    wet: np.ndarray
    band_counts: dict[str, int]


def query_oracle(oracle, features, space: SearchSpace, query_size: int, seed, config: WorkflowConfig | None = None
                 ) -> QueryResult:
    """Score an LHS batch of candidates with the oracle and rank them by WET.

    Ties go to the smaller predicted mean |MBE|, then the lower index.
    ``oracle`` is anything with ``predict_batch(features, encoded) -> (et, mbe)``.
    """
    cfg = config or WorkflowConfig()
    samples = lhs_sample(space, query_size, seed)
    enc = encode_many(samples, space, check_samples=False)
    et, mbe = oracle.predict_batch(features, enc)
    et = np.maximum(np.asarray(et, dtype=float), 1e-12)  # WET needs et > 0
    mbe = np.abs(np.asarray(mbe, dtype=float))
    if et.shape != (query_size,) or mbe.shape != (query_size,):
        raise ValueError("oracle returned predictions of the wrong shape")
    factor = np.where(mbe <= cfg.t1, 1.0, np.where(mbe <= cfg.t2, cfg.penalty2, cfg.penalty3))
    wet = et * factor
    idx = np.arange(query_size)
    ranking = np.lexsort((idx, mbe, wet))
    b = int(ranking[0])
    bands = {WET_BANDS[0]: int(np.sum(mbe <= cfg.t1)),
             WET_BANDS[1]: int(np.sum((mbe > cfg.t1) & (mbe <= cfg.t2))),
             WET_BANDS[2]: int(np.sum(mbe > cfg.t2))}
    best = CandidateScore(samples[b], float(et[b]), float(mbe[b]), float(wet[b]), b)
    return QueryResult(best, ranking, wet, bands)


def derive_seed(*parts) -> int:
    """Reproducible 32-bit seed from integer parts (run seed, round, realization, ...)."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class LedgerEntry:
    round_index: int
    realization: int
    sample: ConfigSample
    summary: dict
    features: FeatureVector | None  # None for ledgers read back from CSV
    timeout_s: float | None = None
    chosen: CandidateScore | None = None

    @property
    def elapsed_s(self) -> float:
        return float(self.summary["elapsed_s"])

    @property
    def mean_abs_mbe(self) -> float:
        return float(np.mean([abs(self.summary[k]) for k in ("mbe_oil", "mbe_water", "mbe_gas")]))


TIMING_FIELDS = ("elapsed_s", "cpu_s", "timeout_s", "predicted_elapsed_s", "predicted_wet")


@dataclass
class RunLedger:
    arm: str
    entries: list[LedgerEntry] = field(default_factory=list)
    refit_sizes: list[int] = field(default_factory=list)

    def append(self, e: LedgerEntry):
        self.entries.append(e)

    def round(self, i: int) -> list[LedgerEntry]:
        return [e for e in self.entries if e.round_index == i]

    @property
    def rounds(self) -> list[int]:
        return sorted({e.round_index for e in self.entries})

    def distinct_samples(self) -> list[ConfigSample]:
        out = []
        for e in self.entries:
            if e.sample not in out:
                out.append(e.sample)
        return out

    def to_rows(self, include_timing: bool = True) -> list[dict]:
        rows = []
        for e in self.entries:
            s = e.summary
            row = {"arm": self.arm, "round": e.round_index, "realization": e.realization,
                   "status": s["status"], "elapsed_s": s["elapsed_s"], "cpu_s": s["cpu_s"],
                   "timeout_s": e.timeout_s if e.timeout_s is not None else "",
                   "timesteps": s["timesteps"], "newton_cycles": s["newton_cycles"],
                   "linear_iterations": s["linear_iterations"], "solver_failures": s["solver_failures"],
                   "cuts": s["cuts"], "mbe_oil": s["mbe_oil"], "mbe_water": s["mbe_water"],
                   "mbe_gas": s["mbe_gas"], "mean_abs_mbe": e.mean_abs_mbe,
                   "sample": json.dumps(e.sample, sort_keys=True),
                   "predicted_elapsed_s": e.chosen.elapsed_s if e.chosen else "",
                   "predicted_mean_abs_mbe": e.chosen.mean_abs_mbe if e.chosen else "",
                   "predicted_wet": e.chosen.wet if e.chosen else ""}
            if not include_timing:
                for k in TIMING_FIELDS:
                    row.pop(k)
            rows.append(row)
        return rows

    def wall_seconds(self) -> float:
        """Host wall time of all runs; kept out of the CSV, which must be reproducible."""
        return float(sum(e.summary.get("wall_s", 0.0) for e in self.entries))

    def to_csv(self, include_timing: bool = True) -> str:
        rows = self.to_rows(include_timing)
        if not rows:
            return ""
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in r.items()})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RunLedger":
        """Rebuild a ledger for reporting; features are not stored in the CSV."""
        reader = csv.DictReader(io.StringIO(text))
        ledger = None
        ints = ("timesteps", "newton_cycles", "linear_iterations", "solver_failures", "cuts")
        floats = ("elapsed_s", "cpu_s", "mbe_oil", "mbe_water", "mbe_gas")
        for r in reader:
            ledger = ledger or cls(r["arm"])
            summary = {"status": r["status"], **{k: int(r[k]) for k in ints}, **{k: float(r[k]) for k in floats}}
            chosen = None
            if r["predicted_wet"]:
                chosen = CandidateScore(json.loads(r["sample"]), float(r["predicted_elapsed_s"]),
                                        float(r["predicted_mean_abs_mbe"]), float(r["predicted_wet"]))
            ledger.append(LedgerEntry(int(r["round"]), int(r["realization"]), json.loads(r["sample"]), summary,
                                      None, float(r["timeout_s"]) if r["timeout_s"] else None, chosen))
        if ledger is None:
            raise ValueError("empty ledger CSV")
        return ledger

    def dataset_rows(self, space: SearchSpace, schema: DatasetSchema, results_by_key: dict | None = None):
        """Training rows: round-i outcome paired with the round-(i-1) features (round 1 with its own)."""
        from .oracle import DatasetRow
        rows = []
        by_key = {(e.round_index, e.realization): e for e in self.entries}
        enc = encode_many([e.sample for e in self.entries], space) if self.entries else []
        for e, c in zip(self.entries, enc):
            prev = by_key.get((e.round_index - 1, e.realization), e)
            s = e.summary
            rows.append(DatasetRow(f"r{e.realization}", prev.features.flatten(), c, float(s["elapsed_s"]),
                                   float(s["mbe_oil"]), float(s["mbe_water"]), float(s["mbe_gas"]),
                                   s["status"], int(s["timesteps"])))
        return rows


@dataclass
class WorkflowResult:
    final: EnsembleState
    ledger: RunLedger
    esmda: EsmdaLedger
    manifest: dict


def _simulate(args):
    case, timeout = args
    return run_simulation(case, wall_timeout_s=np.inf if timeout is None else timeout)


def _run_all(pool, cases, timeouts):
    tasks = list(zip(cases, timeouts))
    if pool is None:
        return [_simulate(t) for t in tasks]
    return list(pool.map(_simulate, tasks))


def coupled_run(problem, initial: EnsembleState, obs: ObservationSet, esmda_config: AssimilationConfig,
                workflow: WorkflowConfig, initial_dataset: Dataset | None = None, tuning: bool = True,
                space: SearchSpace | None = None) -> WorkflowResult:
    """History matching where rounds >= 2 use oracle-chosen controls.

    ``problem`` provides ``build_case(m, controls)`` and ``observe(result)``.
    With ``tuning=False`` every round uses the baseline sample. Runs with
    oracle-chosen controls time out at ``timeout_factor`` times the
    realization's round-1 elapsed time (or the engineer time, if larger).
    Any abnormal or timed-out simulation aborts with :class:`WorkflowError`.
    """
    space = space or builtin_space()
    base = workflow.baseline_sample(space)
    schema = initial_dataset.schema if initial_dataset is not None else DatasetSchema.for_space(space)
    if schema.config_names != space.encoded_names():
        raise ValueError("initial dataset was built for a different search space")
    arm = "tuned" if tuning else "baseline"
    ledger = RunLedger(arm)
    n_r = initial.n_members
    first_elapsed: dict[int, float] = {}
    prev_features: dict[int, FeatureVector] = {}
    init_rows = list(initial_dataset.rows) if initial_dataset is not None else []

    def timeout_for(i: int, j: int) -> float | None:
        # the limit guards oracle-chosen controls; a baseline run is its own reference
        if i == 1 or not tuning:
            return workflow.round1_timeout_s
        ref = first_elapsed[j]
        if workflow.engineer_elapsed and j in workflow.engineer_elapsed:
            ref = max(ref, workflow.engineer_elapsed[j])
        return workflow.timeout_factor * ref

    def forward(ctx: ForwardContext) -> np.ndarray:
        i = ctx.round_index
        samples = [dict(base) for _ in range(n_r)]
        chosen: list[CandidateScore | None] = [None] * n_r
        if tuning and i > 1:
            data = Dataset(schema, init_rows + ledger.dataset_rows(space, schema))
            data = clean_dataset(data)
            ledger.refit_sizes.append(len(data))
            oracle = train(workflow.oracle.kind, workflow.oracle.hyper, workflow.oracle.pipeline, data,
                           seed=derive_seed(workflow.seed, i))
            for j in range(n_r):
                q = query_oracle(oracle, prev_features[j], space, workflow.query_size,
                                 derive_seed(workflow.seed, i, j), workflow)
                samples[j] = q.best.sample
                chosen[j] = q.best
        cases = [problem.build_case(ctx.M[:, j], to_controls(samples[j])) for j in range(n_r)]
        timeouts = [timeout_for(i, j) for j in range(n_r)]
        results = _run_all(pool, cases, timeouts)
        cols = []
        for j, (case, res) in enumerate(zip(cases, results)):
            fv = features_from_result(res, case)
            summary = res.summary()
            summary["wall_s"] = res.wall_s
            ledger.append(LedgerEntry(i, j, samples[j], summary, fv, timeouts[j], chosen[j]))
            if res.status != "normal":
                raise ForwardFailure(j, f"simulation ended {res.status}: {res.message}")
            if i == 1:
                first_elapsed[j] = res.elapsed_s
            prev_features[j] = fv
            cols.append(problem.observe(res))
        return np.column_stack(cols)

    pool = ProcessPoolExecutor(workflow.workers) if workflow.workers > 1 else None
    try:
        final, esmda_ledger = run_esmda(initial, obs, esmda_config, forward)
    except ForwardFailure as exc:
        raise WorkflowError(f"{arm} run aborted: {exc}", ledger) from exc
    finally:
        if pool is not None:
            pool.shutdown()
    manifest = {
        "arm": arm,
        "workflow": workflow.to_dict(),
        "esmda": {"n_assim": esmda_config.n_assim, "alphas": esmda_config.schedule(), "seed": esmda_config.seed,
                  "svd_tol": esmda_config.svd_tol},
        "n_members": n_r,
        "baseline_sample": base,
        "initial_dataset_hash": initial_dataset.content_hash() if initial_dataset is not None else None,
        "initial_dataset_rows": len(init_rows),
        "refit_sizes": ledger.refit_sizes,
        "simulations": len(ledger.entries),
        "wall_s_total": ledger.wall_seconds(),
    }
    return WorkflowResult(final, ledger, esmda_ledger, manifest)


def baseline_run(problem, initial: EnsembleState, obs: ObservationSet, esmda_config: AssimilationConfig,
                 workflow: WorkflowConfig, initial_dataset: Dataset | None = None,
                 space: SearchSpace | None = None) -> WorkflowResult:
    """The same loop with tuning disabled and the same seeds."""
    return coupled_run(problem, initial, obs, esmda_config, workflow, initial_dataset, tuning=False, space=space)


def save_result(result: WorkflowResult, directory):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "ledger.csv"), "w") as fh:
        fh.write(result.ledger.to_csv())
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(result.manifest, fh, indent=1, default=str)
    result.esmda.save(os.path.join(directory, "esmda"))


# campaign -------------------------------------------------------------------

@dataclass
class CampaignResult:
    dataset: Dataset  # cleaned
    raw: Dataset
    discarded: dict[str, int]


def run_campaign(problem, members: np.ndarray, space: SearchSpace, reference: ConfigSample, lhs_n: int = 0,
                 oat_levels: int = 0, seed: int = 0, workers: int = 1, group_prefix: str = "m",
                 timeout_factor: float = 2.0, include_reference: bool = False) -> CampaignResult:
    """Training rows from runs of many configurations on each member.

    Each member first runs with ``reference``; its features are the context
    of every row for that member. The reference run itself becomes a
    self-paired row only with ``include_reference``. Campaign runs time out at ``timeout_factor`` times the reference
    elapsed time. Rows that fail cleaning are counted in ``discarded``.
    """
    schema = DatasetSchema.for_space(space)
    raw = Dataset(schema)
    members = np.atleast_2d(members)
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        ref_cases = [problem.build_case(members[:, k], to_controls(reference)) for k in range(members.shape[1])]
        ref_results = _run_all(pool, ref_cases, [None] * len(ref_cases))
        plans, cases, timeouts, owners = [], [], [], []
        for k, (case, res) in enumerate(zip(ref_cases, ref_results)):
            if res.status != "normal":
                raise RuntimeError(f"reference run of member {k} ended {res.status}: {res.message}")
            plan = []
            if lhs_n:
                plan += lhs_sample(space, lhs_n, derive_seed(seed, k))
            if oat_levels:
                plan += oat_plan(space, oat_levels)[1:]
            for s in plan:
                plans.append(s)
                cases.append(problem.build_case(members[:, k], to_controls(s)))
                timeouts.append(timeout_factor * res.elapsed_s)
                owners.append(k)
        results = _run_all(pool, cases, timeouts)
    finally:
        if pool is not None:
            pool.shutdown()
    contexts = [features_from_result(r, c) for r, c in zip(ref_results, ref_cases)]
    for k, r in enumerate(ref_results if include_reference else []):
        raw.append(make_row(f"{group_prefix}{k}", contexts[k], reference, space, r))
    for s, k, r in zip(plans, owners, results):
        raw.append(make_row(f"{group_prefix}{k}", contexts[k], s, space, r))
    discarded = {"abnormal": sum(r.status == "abnormal" for r in raw.rows),
                 "timeout": sum(r.status == "timeout" for r in raw.rows),
                 "single_step": sum(r.status == "normal" and r.timesteps <= 1 for r in raw.rows)}
    return CampaignResult(clean_dataset(raw), raw, discarded)


# report ---------------------------------------------------------------------

@dataclass
class SpeedupReport:
    tuned: RunLedger
    baseline: RunLedger
    t1: float = 0.05
    t2: float = 0.10
    bins: int = 10

    def __post_init__(self):
        shape = lambda led: sorted((e.round_index, e.realization) for e in led.entries)  # noqa: E731
        if shape(self.tuned) != shape(self.baseline):
            raise ValueError("ledgers cover different (round, realization) sets")

    def _ledger(self, arm: str) -> RunLedger:
        return self.tuned if arm == "tuned" else self.baseline

    def mean_elapsed(self, arm: str, rounds=None) -> float:
        es = [e.elapsed_s for e in self._ledger(arm).entries if rounds is None or e.round_index in rounds]
        return float(np.mean(es))

    def speedup(self, rounds=None) -> float:
        """Baseline mean elapsed over tuned mean elapsed."""
        return self.mean_elapsed("baseline", rounds) / self.mean_elapsed("tuned", rounds)

    def reduction(self, rounds=None) -> float:
        """Fractional reduction of the mean elapsed time."""
        return 1.0 - self.mean_elapsed("tuned", rounds) / self.mean_elapsed("baseline", rounds)

    def rounds_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "tuned_total_s", "baseline_total_s", "tuned_mean_s", "baseline_mean_s", "speedup"])
        for i in self.tuned.rounds:
            t = [e.elapsed_s for e in self.tuned.round(i)]
            b = [e.elapsed_s for e in self.baseline.round(i)]
            w.writerow([i, repr(sum(t)), repr(sum(b)), repr(float(np.mean(t))), repr(float(np.mean(b))),
                        repr(float(np.mean(b) / np.mean(t)))])
        t_all = [e.elapsed_s for e in self.tuned.entries]
        b_all = [e.elapsed_s for e in self.baseline.entries]
        w.writerow(["total", repr(sum(t_all)), repr(sum(b_all)), repr(float(np.mean(t_all))),
                    repr(float(np.mean(b_all))), repr(self.speedup())])
        return buf.getvalue()

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "round", "realization", "elapsed_s", "mean_abs_mbe", "wet_band"])
        for led in (self.tuned, self.baseline):
            for e in led.entries:
                w.writerow([led.arm, e.round_index, e.realization, repr(e.elapsed_s), repr(e.mean_abs_mbe),
                            wet_band(e.mean_abs_mbe, self.t1, self.t2)])
        return buf.getvalue()

    def histogram_csv(self) -> str:
        """Shared-edge histograms of elapsed time and mean |MBE| for both arms."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["quantity", "bin_lo", "bin_hi", "tuned_count", "baseline_count", "tuned_mean", "baseline_mean"])
        for qty, get in (("elapsed_s", lambda e: e.elapsed_s), ("mean_abs_mbe", lambda e: e.mean_abs_mbe)):
            t = np.array([get(e) for e in self.tuned.entries])
            b = np.array([get(e) for e in self.baseline.entries])
            lo, hi = min(t.min(), b.min()), max(t.max(), b.max())
            edges = np.linspace(lo, hi if hi > lo else lo + 1.0, self.bins + 1)
            ct, _ = np.histogram(t, edges)
            cb, _ = np.histogram(b, edges)
            for k in range(self.bins):
                w.writerow([qty, repr(float(edges[k])), repr(float(edges[k + 1])), int(ct[k]), int(cb[k]),
                            repr(float(t.mean())), repr(float(b.mean()))])
        return buf.getvalue()

    def band_counts(self) -> dict[str, dict[str, int]]:
        out = {}
        for led in (self.tuned, self.baseline):
            counts = dict.fromkeys(WET_BANDS, 0)
            for e in led.entries:
                counts[wet_band(e.mean_abs_mbe, self.t1, self.t2)] += 1
            out[led.arm] = counts
        return out

    def bands_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", *WET_BANDS])
        for arm, c in self.band_counts().items():
            w.writerow([arm, *(c[b] for b in WET_BANDS)])
        return buf.getvalue()

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        for name, text in (("rounds.csv", self.rounds_csv()), ("runs.csv", self.runs_csv()),
                           ("histograms.csv", self.histogram_csv()), ("wet_bands.csv", self.bands_csv())):
            with open(os.path.join(directory, name), "w") as fh:
                fh.write(text)


def speedup_report(tuned: RunLedger, baseline: RunLedger, t1: float = 0.05, t2: float = 0.10) -> SpeedupReport:
    return SpeedupReport(tuned, baseline, t1, t2)


def ledger_digest(ledger: RunLedger) -> str:
    """Hash of the ledger without timing fields, for determinism checks."""
    return hashlib.sha256(ledger.to_csv(include_timing=False).encode()).hexdigest()
