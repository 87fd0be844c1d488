"""Command-line interface.

Subcommands::

    simtune init      write a default project configuration
    simtune simulate  run one case (the bundled 20x20 verification case by default)
    simtune dataset   run a training campaign over the generated ensemble
    simtune train     grid search with leave-one-group-out CV; store the best oracle
    simtune esmda     history matching, tuned and/or baseline arm
    simtune report    speedup tables from two ledgers

Exit codes: 0 success, 1 usage or configuration error, 2 simulation
failure, 3 training failure. CSV outputs depend only on the configuration
and seeds; wall-clock times and timestamps go to ``manifest.json`` files.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .esmda import AssimilationConfig
from .logfeat import emit_log
from .oracle import CVConfig, Dataset, EmptyDatasetError, PipelineSpec, TrainedOracle, logo_cv, make_grid
from .oracle.regressors import check_hyperparams
from .searchspace import builtin_space, check, from_controls, to_controls
from .simkernel import SimulationCase, reference_case, run_simulation
from .synthetic import EnsembleGeneratorSpec, generate_ensemble, sample_members, synthetic_observations
from .tunaflow import WorkflowConfig, WorkflowError, coupled_run, derive_seed, run_campaign, save_result
from .tunaflow import RunLedger, speedup_report

log = logging.getLogger("simtune")

EXIT_OK, EXIT_USAGE, EXIT_SIM, EXIT_TRAIN = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


@dataclass
class PathsSpec:
    workdir: str = "simtune-run"
    dataset: str = "dataset.csv"
    oracle: str = "oracle.json"


@dataclass
class ObservationSpec:
    noise_level: float = 0.05
    seed: int = 1


@dataclass
class CampaignSpec:
    members: int | None = None  # None: the prior ensemble itself; n: n fresh prior draws
    seed: int = 2
    lhs_n: int = 20
    oat_levels: int = 0
    include_reference: bool = False


@dataclass
class TrainingSpec:
    kinds: list[str] = field(default_factory=lambda: ["tree", "forest", "knn"])
    scalers: list[str] = field(default_factory=lambda: ["standardize", "rescale_01"])
    k_fractions: list[float] = field(default_factory=lambda: [1.0, 0.9, 0.8])
    overrides: dict = field(default_factory=dict)  # kind -> {hyperparameter: [values]}
    refit_metric: str = "mape"
    seed: int = 3


@dataclass
class WorkflowSpec:
    query_size: int = 10_000
    t1: float = 0.05
    t2: float = 0.10
    baseline_mode: str = "engineer"
    engineer: dict = field(default_factory=lambda: {"lin_iter_max": 5, "dt_max": 5.0})  # over the defaults
    timeout_factor: float = 2.0
    seed: int = 4
    oracle: dict = field(default_factory=lambda: {
        "kind": "forest", "hyper": {"n_estimators": 50, "max_features": "all", "criterion": "mse", "max_depth": None},
        "pipeline": {"scaler": "standardize", "k_fraction": 1.0}})
    use_trained_oracle: bool = True  # refit with the stored oracle's hyperparameters when it exists


@dataclass
class ProjectConfig:
    paths: PathsSpec = field(default_factory=PathsSpec)
    ensemble: EnsembleGeneratorSpec = field(default_factory=EnsembleGeneratorSpec)
    observations: ObservationSpec = field(default_factory=ObservationSpec)
    esmda: dict = field(default_factory=lambda: {"n_assim": 4, "alphas": None, "seed": 5, "svd_tol": 1e-8})
    workflow: WorkflowSpec = field(default_factory=WorkflowSpec)
    campaign: CampaignSpec = field(default_factory=CampaignSpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    workers: int = 1
    base_dir: str = field(default=".", repr=False)

    SECTIONS = {"paths": PathsSpec, "ensemble": EnsembleGeneratorSpec, "observations": ObservationSpec,
                "workflow": WorkflowSpec, "campaign": CampaignSpec, "training": TrainingSpec}

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "ProjectConfig":
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown configuration sections: {sorted(unknown)}")
        kw = {}
        for name, value in d.items():
            sec = cls.SECTIONS.get(name)
            if sec is None:
                kw[name] = value
                continue
            extra = set(value) - {f.name for f in fields(sec)}
            if extra:
                raise ConfigError(f"unknown keys in '{name}': {sorted(extra)}")
            try:
                kw[name] = sec(**value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"section '{name}': {exc}") from exc
        cfg = cls(**kw, base_dir=base_dir)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ProjectConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        return cls.from_dict(data, os.path.dirname(os.path.abspath(path)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return json.loads(json.dumps(d))  # tuples become lists, as after a load

    def validate(self):
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            AssimilationConfig(**self.esmda).schedule()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"esmda: {exc}") from exc
        self.workflow_config()
        self.engineer_sample()
        if self.campaign.lhs_n < 0 or self.campaign.oat_levels < 0:
            raise ConfigError("campaign sizes must be non-negative")
        if self.campaign.members is not None and self.campaign.members < 1:
            raise ConfigError("campaign.members must be positive or null")
        parent = os.path.dirname(self.workdir) or "."
        if not os.path.isdir(parent):
            raise ConfigError(f"workdir parent does not exist: {parent}")

    def set_seed(self, seed: int):
        """Derive every section's seed from one number."""
        self.ensemble.seed = derive_seed(seed, 0)
        self.observations.seed = derive_seed(seed, 1)
        self.campaign.seed = derive_seed(seed, 2)
        self.training.seed = derive_seed(seed, 3)
        self.workflow.seed = derive_seed(seed, 4)
        self.esmda["seed"] = derive_seed(seed, 5)

    @property
    def workdir(self) -> str:
        return os.path.join(self.base_dir, self.paths.workdir)

    def path(self, name: str) -> str:
        return os.path.join(self.workdir, getattr(self.paths, name))

    def engineer_sample(self) -> dict:
        space = builtin_space()
        sample = dict(space.defaults(), **self.workflow.engineer)
        try:
            check(sample, space)
        except ValueError as exc:
            raise ConfigError(f"workflow.engineer: {exc}") from exc
        return sample

    def oracle_config(self) -> CVConfig:
        o = self.workflow.oracle
        try:
            return CVConfig(o["kind"], check_hyperparams(o["kind"], dict(o["hyper"])), PipelineSpec(**o["pipeline"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"workflow.oracle: {exc}") from exc

    def workflow_config(self) -> WorkflowConfig:
        w = self.workflow
        try:
            return WorkflowConfig(query_size=w.query_size, t1=w.t1, t2=w.t2, baseline_mode=w.baseline_mode,
                                  engineer_sample=dict(builtin_space().defaults(), **w.engineer),
                                  timeout_factor=w.timeout_factor, seed=w.seed, workers=self.workers,
                                  oracle=self.oracle_config())
        except ValueError as exc:
            raise ConfigError(f"workflow: {exc}") from exc


def _write(path, text: str):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def _manifest(path, command: str, cfg: ProjectConfig | None, started: float, **extra):
    doc = {"command": command, "version": __version__,
           "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
           "wall_s": time.perf_counter() - started, **extra}
    if cfg is not None:
        doc["config"] = cfg.to_dict()
    _write(path, json.dumps(doc, indent=1, default=str) + "\n")


def _parse_override(text: str, space):
    if "=" not in text:
        raise UsageError(f"override '{text}' is not NAME=VALUE")
    name, raw = text.split("=", 1)
    if name not in space.names:
        raise UsageError(f"unknown numerical parameter '{name}'")
    p = space[name]
    try:
        value = raw if p.kind == "categorical" else int(raw) if p.kind == "integer" else float(raw)
    except ValueError as exc:
        raise UsageError(f"bad value for {name}: {raw}") from exc
    return name, value


def cmd_init(args, cfg):
    path = args.path
    if os.path.exists(path) and not args.force:
        raise UsageError(f"{path} exists (use --force to overwrite)")
    _write(path, json.dumps(ProjectConfig().to_dict(), indent=1) + "\n")
    print(path)
    return EXIT_OK


def cmd_simulate(args, cfg):
    started = time.perf_counter()
    space = builtin_space()
    if args.case:
        try:
            with open(args.case) as fh:
                case = SimulationCase.from_json(fh.read())
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"cannot load case {args.case}: {exc}") from exc
    else:
        case = reference_case()
    sample = from_controls(case.controls, space)
    sample.update(_parse_override(o, space) for o in args.set or [])
    try:
        check(sample, space)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    case = case.with_controls(to_controls(sample, case.controls))
    result = run_simulation(case, wall_timeout_s=args.timeout if args.timeout else np.inf)
    out = args.out or "simulate-out"
    summary = result.summary()
    _write(os.path.join(out, "result.json"), json.dumps(summary, indent=1) + "\n")
    _write(os.path.join(out, "run.log"), emit_log(result, case).to_text())
    _write(os.path.join(out, "curves.csv"), result.curves_csv())
    _write(os.path.join(out, "fip.csv"), result.fip_csv())
    _manifest(os.path.join(out, "manifest.json"), "simulate", None, started, sample=sample,
              sim_wall_s=result.wall_s, case=args.case or "builtin:reference")
    print(f"{result.status} elapsed_s={result.elapsed_s:.6g} timesteps={result.counters.timesteps} "
          f"mean_abs_mbe={result.mean_abs_mbe:.3g}")
    return EXIT_OK if result.status == "normal" else EXIT_SIM


def _problem(cfg: ProjectConfig):
    problem, ensemble, truth = generate_ensemble(cfg.ensemble)
    return problem, ensemble, truth


def cmd_dataset(args, cfg):
    started = time.perf_counter()
    problem, ensemble, _ = _problem(cfg)
    space = builtin_space()
    c = cfg.campaign
    if c.members is None:
        members, prefix = ensemble.M, "r"
    else:
        members, prefix = sample_members(cfg.ensemble, c.members, derive_seed(c.seed, 99)), "c"
    try:
        res = run_campaign(problem, members, space, cfg.engineer_sample(), lhs_n=c.lhs_n, oat_levels=c.oat_levels,
                           seed=c.seed, workers=cfg.workers, group_prefix=prefix,
                           timeout_factor=cfg.workflow.timeout_factor, include_reference=c.include_reference)
    except (RuntimeError, EmptyDatasetError) as exc:
        log.error("campaign failed: %s", exc)
        return EXIT_SIM
    os.makedirs(cfg.workdir, exist_ok=True)
    res.dataset.save(cfg.path("dataset"))
    res.raw.save(os.path.splitext(cfg.path("dataset"))[0] + ".raw.csv")
    _manifest(os.path.join(cfg.workdir, "dataset.manifest.json"), "dataset", cfg, started,
              rows_raw=len(res.raw), rows_clean=len(res.dataset), discarded=res.discarded,
              groups=sorted(set(res.dataset.groups)), dataset_hash=res.dataset.content_hash())
    print(f"{len(res.dataset)} rows ({len(res.raw) - len(res.dataset)} discarded) -> {cfg.path('dataset')}")
    return EXIT_OK


def cmd_train(args, cfg):
    started = time.perf_counter()
    try:
        data = Dataset.load(cfg.path("dataset"))
    except OSError as exc:
        raise ConfigError(f"no dataset at {cfg.path('dataset')} (run 'simtune dataset' first): {exc}") from exc
    t = cfg.training
    try:
        grid = make_grid(t.kinds, t.scalers, t.k_fractions, t.overrides)
        report, oracle = logo_cv(data, grid, t.refit_metric, seed=t.seed, workers=cfg.workers)
    except (ValueError, EmptyDatasetError, KeyError) as exc:
        log.error("training failed: %s", exc)
        return EXIT_TRAIN
    oracle.save(cfg.path("oracle"))
    _write(os.path.join(cfg.workdir, "cv_splits.csv"), report.to_csv())
    _write(os.path.join(cfg.workdir, "cv_summary.csv"), report.summary_csv())
    best = report.best
    _manifest(os.path.join(cfg.workdir, "train.manifest.json"), "train", cfg, started, grid_size=len(grid),
              best=best.label(), best_val=report.mean(report.best_index, "val"), dataset_hash=data.content_hash())
    mape, mse, mae = report.mean(report.best_index, "val")
    print(f"best {best.label()} val MAPE={mape:.2f}% MSE={mse:.4g} MAE={mae:.4g}")
    return EXIT_OK


def cmd_esmda(args, cfg):
    started = time.perf_counter()
    arms = [a for a, on in (("tuned", args.tuned), ("baseline", args.baseline)) if on] or ["tuned", "baseline"]
    problem, ensemble, truth = _problem(cfg)
    obs = synthetic_observations(problem, truth, cfg.observations.noise_level, cfg.observations.seed)
    esmda_cfg = AssimilationConfig(**cfg.esmda)
    wf = cfg.workflow_config()
    dataset = Dataset.load(cfg.path("dataset")) if os.path.exists(cfg.path("dataset")) else None
    if cfg.workflow.use_trained_oracle and os.path.exists(cfg.path("oracle")):
        stored = TrainedOracle.load(cfg.path("oracle"))
        wf.oracle = CVConfig(stored.kind, stored.hyper, stored.pipeline.spec)
    out = os.path.join(cfg.workdir, "esmda")
    status = EXIT_OK
    for arm in arms:
        try:
            res = coupled_run(problem, ensemble, obs, esmda_cfg, wf, dataset, tuning=arm == "tuned")
        except WorkflowError as exc:
            log.error("%s", exc)
            _write(os.path.join(out, arm, "ledger.csv"), exc.ledger.to_csv())
            status = EXIT_SIM
            continue
        save_result(res, os.path.join(out, arm))
        _manifest(os.path.join(out, arm, "manifest.json"), "esmda", cfg, started, run=res.manifest)
        mean = np.mean([e.elapsed_s for e in res.ledger.entries])
        print(f"{arm}: {len(res.ledger.entries)} simulations, mean elapsed {mean:.4g} s -> {os.path.join(out, arm)}")
    return status


def cmd_report(args, cfg):
    started = time.perf_counter()
    root = os.path.join(cfg.workdir, "esmda")
    tuned_path = args.tuned_ledger or os.path.join(root, "tuned", "ledger.csv")
    base_path = args.baseline_ledger or os.path.join(root, "baseline", "ledger.csv")
    try:
        with open(tuned_path) as fh:
            tuned = RunLedger.from_csv(fh.read())
        with open(base_path) as fh:
            base = RunLedger.from_csv(fh.read())
        rep = speedup_report(tuned, base)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot build report: {exc}") from exc
    out = args.out or os.path.join(cfg.workdir, "report")
    rep.save(out)
    rounds = [i for i in tuned.rounds if i > 1]
    _manifest(os.path.join(out, "manifest.json"), "report", cfg, started, tuned=tuned_path, baseline=base_path)
    print(f"speedup {rep.speedup():.3f} overall; mean elapsed reduction over rounds {rounds[0] if rounds else 1}-"
          f"{rounds[-1] if rounds else 1}: {100 * rep.reduction(rounds or None):.1f}% -> {out}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="project configuration JSON")
    common.add_argument("--seed", type=int, help="derive every seed in the configuration from N")
    common.add_argument("--workers", type=int, help="simulation / CV worker processes")
    common.add_argument("--out", help="output directory (overrides paths.workdir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="simtune", description="Autotuning of simulator controls inside ensemble history matching.")
    p.add_argument("--version", action="version", version=f"simtune {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init", parents=[common], help="write a default project configuration")
    s.add_argument("path", nargs="?", default="simtune.json")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_init, needs_config=False)

    s = sub.add_parser("simulate", parents=[common], help="run one simulation case")
    s.add_argument("case", nargs="?", help="case JSON (default: built-in 20x20 verification case)")
    s.add_argument("--set", action="append", metavar="NAME=VALUE", help="numerical control override")
    s.add_argument("--timeout", type=float, help="run-clock limit in seconds")
    s.set_defaults(func=cmd_simulate, needs_config=False)

    s = sub.add_parser("dataset", parents=[common], help="run the training campaign")
    s.set_defaults(func=cmd_dataset, needs_config=True)

    s = sub.add_parser("train", parents=[common], help="grid search and LOGO cross-validation")
    s.set_defaults(func=cmd_train, needs_config=True)

    s = sub.add_parser("esmda", parents=[common], help="history matching with and/or without tuning")
    s.add_argument("--tuned", action="store_true", help="run the tuned arm")
    s.add_argument("--baseline", action="store_true", help="run the baseline arm")
    s.set_defaults(func=cmd_esmda, needs_config=True)

    s = sub.add_parser("report", parents=[common], help="speedup tables from a tuned and a baseline ledger")
    s.add_argument("--tuned-ledger")
    s.add_argument("--baseline-ledger")
    s.set_defaults(func=cmd_report, needs_config=True)
    return p


def _load_config(args) -> ProjectConfig | None:
    if args.config:
        cfg = ProjectConfig.load(args.config)
    elif args.needs_config:
        cfg = ProjectConfig()
        cfg.validate()
    else:
        return None
    if args.seed is not None:
        cfg.set_seed(args.seed)
    if args.workers is not None:
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        cfg.workers = args.workers
    if args.out and args.func is not cmd_report:
        cfg.paths.workdir = os.path.abspath(args.out)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args)
        return args.func(args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"simtune: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
