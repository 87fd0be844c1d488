"""The trained oracle: one fitted pipeline feeding two regressors.

The first regressor predicts elapsed time, the second the mean |MBE| over
the three phases (percent).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..logfeat import FeatureVector
from ..searchspace import ConfigSample, SearchSpace, encode_many
from .data import Dataset, DatasetSchema
from .pipeline import FittedPipeline, PipelineSpec, RawMatrix, TransformedMatrix, fit_pipeline
from .regressors import check_hyperparams, make_regressor, regressor_from_dict


class SchemaMismatchError(ValueError):
    pass


@dataclass
class TrainedOracle:
    kind: str
    hyper: dict
    pipeline: FittedPipeline
    elapsed_model: object
    quality_model: object
    schema: DatasetSchema
    seed: int
    dataset_hash: str
    n_rows: int

    def predict_transformed(self, Xt: TransformedMatrix) -> tuple[np.ndarray, np.ndarray]:
        if not isinstance(Xt, TransformedMatrix):
            raise TypeError("expected a TransformedMatrix")
        return self.elapsed_model.predict(Xt.values), self.quality_model.predict(Xt.values)

    def predict_raw(self, X: RawMatrix) -> tuple[np.ndarray, np.ndarray]:
        return self.predict_transformed(self.pipeline.transform(X))

    def _space(self) -> SearchSpace:
        return self.schema.space()

    def predict_batch(self, features, samples) -> tuple[np.ndarray, np.ndarray]:
        """Predictions for many configurations on one model, in input order.

        ``samples`` is a list of ConfigSample dicts or an already encoded
        matrix (one row per configuration).
        """
        feats = features.flatten() if isinstance(features, FeatureVector) else np.asarray(features, dtype=float)
        if feats.size != len(self.schema.feature_names):
            raise SchemaMismatchError(f"expected {len(self.schema.feature_names)} features, got {feats.size}")
        if isinstance(samples, np.ndarray):
            enc = np.atleast_2d(samples).astype(float)
        else:
            enc = encode_many(list(samples), self._space())
        if enc.shape[1] != len(self.schema.config_names):
            raise SchemaMismatchError(f"expected {len(self.schema.config_names)} config columns, got {enc.shape[1]}")
        X = np.hstack([np.broadcast_to(feats, (enc.shape[0], feats.size)), enc])
        return self.predict_raw(RawMatrix(X))

    def predict(self, features, sample: ConfigSample) -> tuple[float, float]:
        et, q = self.predict_batch(features, [sample])
        return float(et[0]), float(q[0])

    def to_dict(self) -> dict:
        return {
            "format": "simtune-oracle/1",
            "kind": self.kind,
            "hyper": self.hyper,
            "seed": self.seed,
            "dataset_hash": self.dataset_hash,
            "n_rows": self.n_rows,
            "schema": self.schema.to_dict(),
            "pipeline": self.pipeline.to_dict(),
            "elapsed_model": self.elapsed_model.to_dict(),
            "quality_model": self.quality_model.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TrainedOracle":
        d = json.loads(text)
        if d.get("format") != "simtune-oracle/1":
            raise ValueError("not an oracle document")
        return cls(d["kind"], d["hyper"], FittedPipeline.from_dict(d["pipeline"]),
                   regressor_from_dict(d["elapsed_model"]), regressor_from_dict(d["quality_model"]),
                   DatasetSchema.from_dict(d["schema"]), d["seed"], d["dataset_hash"], d["n_rows"])

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "TrainedOracle":
        with open(path) as fh:
            return cls.from_json(fh.read())


def train(kind: str, hyper: dict, pipeline: PipelineSpec, data: Dataset, seed: int = 0) -> TrainedOracle:
    """Fit the pipeline and both regressors on every row of ``data``."""
    hyper = check_hyperparams(kind, hyper)
    X = data.inputs()
    y_et = data.elapsed
    fitted = fit_pipeline(pipeline, X, y_et)
    Xt = fitted.transform(X)
    s_et, s_q = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2))
    et_model = make_regressor(kind, hyper, s_et).fit(Xt.values, y_et)
    q_model = make_regressor(kind, hyper, s_q).fit(Xt.values, data.quality)
    return TrainedOracle(kind, hyper, fitted, et_model, q_model, data.schema, int(seed),
                         data.content_hash(), len(data))
