"""Mixed categorical / numeric parameter spaces for the numerical controls.

Samples are plain ``{name: value}`` dicts. Numeric kinds are ``real``,
``integer`` and ``log_real`` (uniform in log space); ``categorical`` values
are strings.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .simkernel.model import NumericalControls

KINDS = ("categorical", "integer", "real", "log_real")
ConfigSample = dict  # name -> value

# (lower, upper) pairs that must satisfy lower <= upper when both are present
CROSS_RULES = (("dt_min", "dt_max"), ("norm_press", "maxchange_press"), ("norm_satur", "maxchange_satur"))


class InvalidSampleError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass
class ParameterDef:
    name: str
    kind: str
    domain: list
    default: Any

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            self.domain = [str(c) for c in self.domain]
            if len(self.domain) < 1 or len(set(self.domain)) != len(self.domain):
                raise ValueError(f"{self.name}: categories must be unique and non-empty")
            self.default = str(self.default)
        else:
            lo, hi = self.domain
            if not lo < hi:
                raise ValueError(f"{self.name}: need lo < hi")
            if self.kind == "log_real" and lo <= 0:
                raise ValueError(f"{self.name}: log_real needs lo > 0")
            self.domain = [lo, hi]
        problem = self.check(self.default)
        if problem:
            raise ValueError(f"{self.name}: default {problem}")

    @property
    def numeric(self) -> bool:
        return self.kind != "categorical"

    @property
    def width(self) -> int:
        return len(self.domain) if self.kind == "categorical" else 1

    def check(self, value) -> str | None:
        """Reason the value is outside the domain, or ``None``."""
        if self.kind == "categorical":
            return None if str(value) in self.domain else f"{value!r} not in {self.domain}"
        if isinstance(value, (bool, str)) or not isinstance(value, (int, float, np.integer, np.floating)):
            return f"{value!r} is not a number"
        if self.kind == "integer" and float(value) != round(float(value)):
            return f"{value!r} is not an integer"
        lo, hi = self.domain
        if not lo <= value <= hi:
            return f"{value!r} outside [{lo}, {hi}]"
        return None

    def to_unit(self, value) -> float:
        lo, hi = self.domain
        if self.kind == "log_real":
            return (math.log(value) - math.log(lo)) / (math.log(hi) - math.log(lo))
        return (float(value) - lo) / (hi - lo)

    def from_unit(self, u: float):
        lo, hi = self.domain
        u = min(max(float(u), 0.0), 1.0)
        if self.kind == "log_real":
            v = math.exp(math.log(lo) + u * (math.log(hi) - math.log(lo)))
        elif self.kind == "integer":
            return int(min(max(math.floor(lo + u * (hi - lo) + 0.5), lo), hi))
        else:
            v = lo + u * (hi - lo)
        return float(min(max(v, lo), hi))  # round-off must not leave the domain

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "domain": list(self.domain), "default": self.default}


@dataclass
class SearchSpace:
    params: list[ParameterDef] = field(default_factory=list)

    def __post_init__(self):
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]

    def __getitem__(self, name: str) -> ParameterDef:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def __len__(self) -> int:
        return len(self.params)

    @property
    def width(self) -> int:
        """Length of an encoded sample."""
        return sum(p.width for p in self.params)

    def encoded_names(self) -> list[str]:
        out = []
        for p in self.params:
            out += [f"{p.name}={c}" for c in p.domain] if p.kind == "categorical" else [p.name]
        return out

    def defaults(self) -> ConfigSample:
        return {p.name: p.default for p in self.params}

    def to_json(self) -> str:
        return json.dumps({"parameters": [p.to_dict() for p in self.params]}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SearchSpace":
        data = json.loads(text)
        return cls([ParameterDef(**p) for p in data["parameters"]])


def builtin_space() -> SearchSpace:
    """The tunable controls of the built-in simulator."""
    P = ParameterDef
    return SearchSpace([
        P("dt_max", "real", [5.0, 365.0], 365.0),
        P("dt_min", "real", [1e-6, 1e-3], 1e-3),
        P("lin_iter_max", "integer", [5, 200], 10),
        P("maxchange_press", "integer", [15, 300], 60),
        P("maxchange_satur", "real", [0.1, 0.9], 0.1),
        P("ncuts_max", "categorical", ["unlimited", "10", "100"], "unlimited"),
        P("newton_max", "integer", [5, 40], 10),
        P("norm_press", "integer", [10, 70], 30),
        P("norm_satur", "real", [0.1, 0.3], 0.1),
        P("north_restart", "integer", [15, 200], 30),
        P("pivot_stab", "categorical", ["off", "on"], "off"),
        P("lin_tol", "log_real", [1e-5, 1e-3], 1e-4),
        P("solver_kind", "categorical", ["direct", "iterative"], "iterative"),
        P("ordering", "categorical", ["natural", "rcm", "red-black"], "red-black"),
        P("formulation", "categorical", ["fully-implicit", "impes"], "fully-implicit"),
    ])


def validate(sample: ConfigSample, space: SearchSpace) -> list[str]:
    """Every domain and cross-field violation of ``sample``; empty means valid."""
    out = []
    for p in space.params:
        if p.name not in sample:
            out.append(f"{p.name}: missing")
            continue
        problem = p.check(sample[p.name])
        if problem:
            out.append(f"{p.name}: {problem}")
    extra = set(sample) - set(space.names)
    out += [f"{name}: not a parameter of the space" for name in sorted(extra)]
    for lower, upper in CROSS_RULES:
        if lower in sample and upper in sample and lower in space.names and upper in space.names:
            try:
                if sample[lower] > sample[upper]:
                    out.append(f"{lower} must not exceed {upper}")
            except TypeError:
                pass  # already reported as a domain violation
    return out


def check(sample: ConfigSample, space: SearchSpace):
    violations = validate(sample, space)
    if violations:
        raise InvalidSampleError(violations)


def repair(sample: ConfigSample, space: SearchSpace) -> ConfigSample:
    """Fix cross-field violations: swap the dt bounds, clamp norm_* to maxchange_*."""
    s = dict(sample)
    names = space.names
    if "dt_min" in names and "dt_max" in names and s["dt_min"] > s["dt_max"]:
        s["dt_min"], s["dt_max"] = s["dt_max"], s["dt_min"]
    for norm, cap in (("norm_press", "maxchange_press"), ("norm_satur", "maxchange_satur")):
        if norm in names and cap in names and s[norm] > s[cap]:
            s[norm] = s[cap]
    return s


def lhs_sample(space: SearchSpace, n: int, seed) -> list[ConfigSample]:
    """Latin hypercube sample of ``n`` configurations.

    Each numeric axis (log axis for ``log_real``) is cut into ``n`` equal
    strata with exactly one point per stratum; integers are drawn on
    ``[lo - 0.5, hi + 0.5]`` and rounded. Categories are dealt out in
    near-equal counts. Cross-field violations are repaired afterwards.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    columns = {}
    for p in space.params:
        if p.kind == "categorical":
            k = len(p.domain)
            order = rng.permutation(k)
            idx = rng.permutation(order[np.arange(n) % k])
            columns[p.name] = [p.domain[i] for i in idx]
            continue
        u = (rng.permutation(n) + rng.random(n)) / n
        lo, hi = p.domain
        if p.kind in ("real", "log_real"):
            vals = [p.from_unit(x) for x in u]
        else:
            raw = (lo - 0.5) + u * (hi - lo + 1.0)
            vals = [int(min(max(math.floor(x + 0.5), lo), hi)) for x in raw]
        columns[p.name] = vals
    samples = [{name: columns[name][i] for name in space.names} for i in range(n)]
    return [repair(s, space) for s in samples]


def oat_plan(space: SearchSpace, levels_per_numeric: int) -> list[ConfigSample]:
    """Defaults first, then one-at-a-time variations of each parameter.

    Variants equal to the baseline, repeated variants and variants breaking a
    cross-field rule are left out (repairing them would move a second
    parameter).
    """
    if levels_per_numeric < 2:
        raise ValueError("need at least two levels per numeric parameter")
    base = space.defaults()
    plan = [base]
    seen = {_key(base)}
    for p in space.params:
        if p.kind == "categorical":
            values = list(p.domain)
        else:
            values = [p.from_unit(u) for u in np.linspace(0.0, 1.0, levels_per_numeric)]
        for v in values:
            s = dict(base)
            s[p.name] = v
            k = _key(s)
            if k in seen or validate(s, space):
                continue
            seen.add(k)
            plan.append(s)
    return plan


def _key(sample: ConfigSample) -> tuple:
    return tuple(sorted((k, float(v) if not isinstance(v, str) else v) for k, v in sample.items()))


def encode(sample: ConfigSample, space: SearchSpace) -> np.ndarray:
    """Numeric kinds scaled to [0, 1] over their domain, categories one-hot."""
    check(sample, space)
    return _encode_unchecked(sample, space)


def _encode_unchecked(sample: ConfigSample, space: SearchSpace) -> np.ndarray:
    return encode_many([sample], space, check_samples=False)[0]


def encode_many(samples: list[ConfigSample], space: SearchSpace, check_samples: bool = True) -> np.ndarray:
    """Row-wise :func:`encode`, vectorised per column.

    ``check_samples=False`` skips validation for samples known to be valid
    (e.g. straight from :func:`lhs_sample`).
    """
    if check_samples:
        for s in samples:
            check(s, space)
    out = np.zeros((len(samples), space.width))
    j = 0
    for p in space.params:
        col = [s[p.name] for s in samples]
        if p.kind == "categorical":
            lookup = {c: i for i, c in enumerate(p.domain)}
            hot = np.array([lookup[str(v)] for v in col], dtype=np.int64)
            out[np.arange(len(samples)), j + hot] = 1.0
        else:
            lo, hi = p.domain
            v = np.array(col, dtype=float)
            if p.kind == "log_real":
                out[:, j] = (np.log(v) - math.log(lo)) / (math.log(hi) - math.log(lo))
            else:
                out[:, j] = (v - lo) / (hi - lo)
        j += p.width
    return out


def decode(vector, space: SearchSpace) -> ConfigSample:
    """Inverse of :func:`encode`; integers are rounded, categories take the argmax."""
    x = np.asarray(vector, dtype=float)
    if x.shape != (space.width,):
        raise ValueError(f"expected a vector of length {space.width}")
    out = {}
    j = 0
    for p in space.params:
        if p.kind == "categorical":
            out[p.name] = p.domain[int(np.argmax(x[j:j + p.width]))]
        else:
            out[p.name] = p.from_unit(x[j])
        j += p.width
    return out


def to_controls(sample: ConfigSample, base: NumericalControls | None = None) -> NumericalControls:
    """Numerical controls with the sample's values applied over ``base``."""
    changes = {}
    for name, v in sample.items():
        if name == "ncuts_max":
            changes[name] = None if str(v) == "unlimited" else int(v)
        elif name in ("lin_iter_max", "newton_max", "north_restart"):
            changes[name] = int(v)
        elif isinstance(v, str):
            changes[name] = v
        else:
            changes[name] = float(v)
    return (base or NumericalControls()).replace(**changes)


def from_controls(controls: NumericalControls, space: SearchSpace) -> ConfigSample:
    """The sample describing ``controls`` on the parameters of ``space``."""
    out = {}
    for p in space.params:
        v = getattr(controls, p.name)
        if p.name == "ncuts_max":
            v = "unlimited" if v is None else str(v)
        elif p.kind == "integer":
            v = int(round(v))
        elif p.kind != "categorical":
            v = float(v)
        out[p.name] = v
    return out
