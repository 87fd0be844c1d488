"""Grid search with leave-one-group-out cross-validation."""
from __future__ import annotations

import csv
import io
import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .model import TrainedOracle, train
from .pipeline import K_FRACTIONS, SCALERS, PipelineSpec, RawMatrix, fit_pipeline
from .regressors import GRIDS, check_hyperparams, make_regressor

METRICS = ("mape", "mse", "mae")


def metrics(y_true, y_pred) -> tuple[float, float, float]:
    """(MAPE in percent, MSE, MAE)."""
    y = np.asarray(y_true, dtype=float)
    p = np.asarray(y_pred, dtype=float)
    if y.shape != p.shape or y.size == 0:
        raise ValueError("y_true and y_pred need equal, non-zero lengths")
    if np.any(y == 0):
        raise ValueError("MAPE is undefined for zero true values")
    err = p - y
    return float(np.mean(np.abs(err) / np.abs(y)) * 100.0), float(np.mean(err ** 2)), float(np.mean(np.abs(err)))


def logo_splits(groups) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """One (held-out group, train rows, validation rows) split per distinct group, groups sorted."""
    g = np.asarray(groups, dtype=object)
    names = sorted(set(g.tolist()))
    if len(names) < 2:
        raise ValueError("leave-one-group-out needs at least two groups")
    return [(name, np.flatnonzero(g != name), np.flatnonzero(g == name)) for name in names]


@dataclass(frozen=True)
class CVConfig:
    kind: str
    hyper: dict
    pipeline: PipelineSpec

    def label(self) -> str:
        hp = ";".join(f"{k}={v}" for k, v in sorted(self.hyper.items()))
        return f"{self.kind}[{hp}]|{self.pipeline.scaler}|k={self.pipeline.k_fraction}"


def make_grid(kinds=("tree", "forest", "knn"), scalers=SCALERS, k_fractions=K_FRACTIONS,
              overrides: dict | None = None) -> list[CVConfig]:
    """Cartesian grid over hyperparameters and pipeline choices.

    ``overrides`` maps kind -> {name: [values]} to shrink a kind's grid.
    """
    out = []
    for kind in kinds:
        grid = dict(GRIDS[kind])
        grid.update((overrides or {}).get(kind, {}))
        names = sorted(grid)
        for values in itertools.product(*(grid[n] for n in names)):
            hyper = check_hyperparams(kind, dict(zip(names, values)))
            for sc in scalers:
                for k in k_fractions:
                    out.append(CVConfig(kind, hyper, PipelineSpec(sc, k)))
    return out


@dataclass
class SplitRecord:
    config_index: int
    held_out: str
    train_groups: list[str]
    val_groups: list[str]
    n_train: int
    n_val: int
    train: tuple[float, float, float]
    val: tuple[float, float, float]


@dataclass
class CVReport:
    configs: list[CVConfig]
    splits: list[SplitRecord] = field(default_factory=list)
    refit_metric: str = "mape"
    best_index: int = -1
    refit: bool = True

    def mean(self, config_index: int, part: str = "val") -> tuple[float, float, float]:
        recs = [getattr(s, part) for s in self.splits if s.config_index == config_index]
        return tuple(float(np.mean([r[i] for r in recs])) for i in range(3))

    @property
    def best(self) -> CVConfig:
        return self.configs[self.best_index]

    def leakage_free(self) -> bool:
        return all(not set(s.train_groups) & set(s.val_groups) for s in self.splits)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config_index", "config", "held_out", "n_train", "n_val",
                    "train_mape", "train_mse", "train_mae", "val_mape", "val_mse", "val_mae", "best"])
        for s in self.splits:
            w.writerow([s.config_index, self.configs[s.config_index].label(), s.held_out, s.n_train, s.n_val,
                        *(repr(float(v)) for v in s.train), *(repr(float(v)) for v in s.val), int(s.config_index == self.best_index)])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config_index", "config", "train_mape", "train_mse", "train_mae",
                    "val_mape", "val_mse", "val_mae", "best"])
        for i, c in enumerate(self.configs):
            w.writerow([i, c.label(), *(repr(float(v)) for v in self.mean(i, "train")),
                        *(repr(float(v)) for v in self.mean(i, "val")), int(i == self.best_index)])
        return buf.getvalue()


def _evaluate(args):
    ci, cfg, X, y, tr, va, seed = args
    fitted = fit_pipeline(cfg.pipeline, RawMatrix(X[tr]), y[tr])
    model = make_regressor(cfg.kind, cfg.hyper, seed).fit(fitted.transform(RawMatrix(X[tr])).values, y[tr])
    p_tr = model.predict(fitted.transform(RawMatrix(X[tr])).values)
    p_va = model.predict(fitted.transform(RawMatrix(X[va])).values)
    return ci, metrics(y[tr], p_tr), metrics(y[va], p_va)


def logo_cv(data: Dataset, grid: list[CVConfig], refit_metric: str = "mape", seed: int = 0,
            workers: int = 1) -> tuple[CVReport, TrainedOracle]:
    """Score every grid point on the elapsed target, then refit the best on all rows.

    Inside each split the pipeline is fitted on the training rows only.
    Ties in the mean validation metric go to the earlier grid point.
    """
    if refit_metric not in METRICS:
        raise ValueError(f"refit_metric must be one of {METRICS}")
    if not grid:
        raise ValueError("empty grid")
    splits = logo_splits(data.groups)
    X = data.inputs().values
    y = data.elapsed
    groups = data.groups
    tasks = [(ci, cfg, X, y, tr, va, seed) for ci, cfg in enumerate(grid) for _, tr, va in splits]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_evaluate, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        results = [_evaluate(t) for t in tasks]
    report = CVReport(list(grid), refit_metric=refit_metric)
    for (ci, m_tr, m_va), (_, _, _, _, tr, va, _) in zip(results, tasks):
        report.splits.append(SplitRecord(
            ci, str(groups[va[0]]), sorted(set(groups[tr].tolist())), sorted(set(groups[va].tolist())),
            int(tr.size), int(va.size), m_tr, m_va))
    col = METRICS.index(refit_metric)
    scores = [report.mean(i)[col] for i in range(len(grid))]
    report.best_index = int(np.argmin(scores))
    best = report.best
    return report, train(best.kind, best.hyper, best.pipeline, data, seed)
