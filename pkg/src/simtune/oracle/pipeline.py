"""Scaling and top-k feature selection fitted on training rows only.

Raw and transformed matrices are distinct types so a fitted pipeline can
never be applied twice on the same prediction path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCALERS = ("rescale_01", "standardize")
K_FRACTIONS = (1.0, 0.9, 0.8)


@dataclass(frozen=True)
class RawMatrix:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[None, :]
        if v.ndim != 2:
            raise ValueError("expected a 2-D matrix")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]

    def rows(self, idx) -> "RawMatrix":
        return RawMatrix(self.values[idx])


@dataclass(frozen=True)
class TransformedMatrix:
    values: np.ndarray

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class PipelineSpec:
    scaler: str = "standardize"
    k_fraction: float = 1.0

    def __post_init__(self):
        if self.scaler not in SCALERS:
            raise ValueError(f"unknown scaler {self.scaler!r}")
        if self.k_fraction not in K_FRACTIONS:
            raise ValueError(f"k_fraction must be one of {K_FRACTIONS}")

    def to_dict(self) -> dict:
        return {"scaler": self.scaler, "k_fraction": self.k_fraction}


@dataclass
class FittedPipeline:
    spec: PipelineSpec
    center: np.ndarray
    scale: np.ndarray  # 0 marks a constant column, mapped to 0
    selected: np.ndarray
    scores: np.ndarray

    @property
    def n_inputs(self) -> int:
        return self.center.size

    def transform(self, X: RawMatrix) -> TransformedMatrix:
        if not isinstance(X, RawMatrix):
            raise TypeError("pipeline input must be a RawMatrix")
        v = X.values
        if v.shape[1] != self.n_inputs:
            raise ValueError(f"expected {self.n_inputs} columns, got {v.shape[1]}")
        safe = np.where(self.scale > 0, self.scale, 1.0)
        z = np.where(self.scale > 0, (v - self.center) / safe, 0.0)
        return TransformedMatrix(z[:, self.selected])

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
            "selected": self.selected.tolist(),
            "scores": self.scores.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedPipeline":
        return cls(PipelineSpec(**d["spec"]), np.array(d["center"], dtype=float), np.array(d["scale"], dtype=float),
                   np.array(d["selected"], dtype=np.int64), np.array(d["scores"], dtype=float))


def correlation_scores(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """|Pearson r| of every column with ``y``; constant columns (or constant y) score 0."""
    xc = X - X.mean(axis=0)
    yc = y - y.mean()
    sx = np.sqrt((xc ** 2).sum(axis=0))
    sy = np.sqrt((yc ** 2).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (xc * yc[:, None]).sum(axis=0) / (sx * sy)
    r = np.where((sx > 0) & (sy > 0), np.abs(r), 0.0)
    return np.clip(np.nan_to_num(r), 0.0, 1.0)


def n_selected(k_fraction: float, n_columns: int) -> int:
    return max(1, min(n_columns, int(round(k_fraction * n_columns))))


def fit_pipeline(spec: PipelineSpec, X: RawMatrix, y_elapsed) -> FittedPipeline:
    """Fit scaler statistics and the top-k column selection on training rows."""
    if not isinstance(X, RawMatrix):
        raise TypeError("pipeline input must be a RawMatrix")
    v = X.values
    y = np.asarray(y_elapsed, dtype=float)
    if v.shape[0] < 2:
        raise ValueError("a pipeline needs at least two training rows")
    if y.shape != (v.shape[0],):
        raise ValueError("target length does not match the rows")
    if spec.scaler == "rescale_01":
        center = v.min(axis=0)
        scale = v.max(axis=0) - center
    else:
        center = v.mean(axis=0)
        scale = v.std(axis=0)
    scale = np.where(scale > 1e-300, scale, 0.0)
    scores = correlation_scores(v, y)
    k = n_selected(spec.k_fraction, v.shape[1])
    # stable: equal scores keep column order
    top = np.argsort(-scores, kind="stable")[:k]
    return FittedPipeline(spec, center, scale, np.sort(top).astype(np.int64), scores)
