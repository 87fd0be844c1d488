"""Training rows for the oracle and their CSV + JSON-sidecar persistence.

A row pairs the *context* features of a reservoir model (extracted from an
earlier run on that model) with an encoded configuration and the outcome of
running the model with that configuration.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from ..logfeat import FeatureVector, feature_names
from ..searchspace import ConfigSample, SearchSpace, encode
from .pipeline import RawMatrix

TARGETS = ("elapsed_s", "mbe_o", "mbe_w", "mbe_g")
GROUP_COLUMN = "group_id"


class EmptyDatasetError(ValueError):
    pass


@dataclass
class DatasetSchema:
    feature_names: list[str]
    config_names: list[str]
    space_json: str | None = None

    @property
    def n_inputs(self) -> int:
        return len(self.feature_names) + len(self.config_names)

    def columns(self) -> list[str]:
        return [GROUP_COLUMN, "status", "timesteps"] + self.feature_names + self.config_names + list(TARGETS)

    def space(self) -> SearchSpace:
        if self.space_json is None:
            raise ValueError("schema carries no search space")
        return SearchSpace.from_json(self.space_json)

    def to_dict(self) -> dict:
        return {
            "columns": self.columns(),
            "kinds": {"group": GROUP_COLUMN, "status": "status", "timesteps": "timesteps",
                      "features": self.feature_names, "config": self.config_names, "targets": list(TARGETS)},
            "group_column": GROUP_COLUMN,
            "target_columns": list(TARGETS),
            "space": json.loads(self.space_json) if self.space_json else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        space = json.dumps(d["space"], indent=1) if d.get("space") else None
        return cls(list(d["kinds"]["features"]), list(d["kinds"]["config"]), space)

    @classmethod
    def for_space(cls, space: SearchSpace) -> "DatasetSchema":
        return cls(feature_names(), space.encoded_names(), space.to_json())


@dataclass
class DatasetRow:
    group_id: str
    features: np.ndarray
    config: np.ndarray
    elapsed_s: float
    mbe_o: float
    mbe_w: float
    mbe_g: float
    status: str = "normal"
    timesteps: int = 2  # of the target run, used by cleaning

    @property
    def mean_abs_mbe(self) -> float:
        return (abs(self.mbe_o) + abs(self.mbe_w) + abs(self.mbe_g)) / 3.0

    @property
    def inputs(self) -> np.ndarray:
        return np.concatenate([self.features, self.config])


def make_row(group_id, context: FeatureVector | np.ndarray, sample: ConfigSample, space: SearchSpace,
             result) -> DatasetRow:
    """Row from a finished run (``SimulationResult``) of ``sample`` on the model of ``context``."""
    feats = context.flatten() if isinstance(context, FeatureVector) else np.asarray(context, dtype=float)
    mbe = result.mbe
    return DatasetRow(str(group_id), feats, encode(sample, space), float(result.elapsed_s),
                      float(mbe["oil"]), float(mbe["water"]), float(mbe["gas"]),
                      result.status, int(result.counters.timesteps))


@dataclass
class Dataset:
    schema: DatasetSchema
    rows: list[DatasetRow] = field(default_factory=list)

    def __post_init__(self):
        for r in self.rows:
            self._check(r)

    def _check(self, r: DatasetRow):
        if r.features.size != len(self.schema.feature_names) or r.config.size != len(self.schema.config_names):
            raise ValueError("row shape does not match the dataset schema")

    def append(self, row: DatasetRow):
        self._check(row)
        self.rows.append(row)

    def extend(self, rows):
        for r in rows:
            self.append(r)

    def __len__(self):
        return len(self.rows)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.schema, [self.rows[i] for i in idx])

    def inputs(self) -> RawMatrix:
        if not self.rows:
            return RawMatrix(np.zeros((0, self.schema.n_inputs)))
        return RawMatrix(np.vstack([r.inputs for r in self.rows]))

    @property
    def elapsed(self) -> np.ndarray:
        return np.array([r.elapsed_s for r in self.rows])

    @property
    def quality(self) -> np.ndarray:
        """Mean |MBE| over the three phases, in percent."""
        return np.array([r.mean_abs_mbe for r in self.rows])

    @property
    def groups(self) -> np.ndarray:
        return np.array([r.group_id for r in self.rows], dtype=object)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.schema.columns())
        for r in self.rows:
            w.writerow([r.group_id, r.status, r.timesteps] + [repr(float(v)) for v in r.features]
                       + [repr(float(v)) for v in r.config]
                       + [repr(float(v)) for v in (r.elapsed_s, r.mbe_o, r.mbe_w, r.mbe_g)])
        return buf.getvalue()

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()

    def save(self, csv_path, sidecar_path=None):
        sidecar_path = sidecar_path or str(csv_path) + ".json"
        with open(csv_path, "w") as fh:
            fh.write(self.to_csv())
        with open(sidecar_path, "w") as fh:
            json.dump(self.schema.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, csv_path, sidecar_path=None) -> "Dataset":
        sidecar_path = sidecar_path or str(csv_path) + ".json"
        with open(sidecar_path) as fh:
            schema = DatasetSchema.from_dict(json.load(fh))
        with open(csv_path) as fh:
            return cls.from_csv(fh.read(), schema)

    @classmethod
    def from_csv(cls, text: str, schema: DatasetSchema) -> "Dataset":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header != schema.columns():
            raise ValueError("CSV header does not match the schema")
        nf, nc = len(schema.feature_names), len(schema.config_names)
        rows = []
        for rec in reader:
            vals = [float(v) for v in rec[3:]]
            rows.append(DatasetRow(rec[0], np.array(vals[:nf]), np.array(vals[nf:nf + nc]),
                                   *vals[nf + nc:], status=rec[1], timesteps=int(rec[2])))
        return cls(schema, rows)


def clean_dataset(raw: Dataset) -> Dataset:
    """Drop runs that did not end normally, single-step runs and zero elapsed times."""
    kept = [r for r in raw.rows if r.status == "normal" and r.timesteps > 1 and r.elapsed_s > 0]
    if not kept:
        raise EmptyDatasetError("no rows left after cleaning")
    return Dataset(raw.schema, kept)
