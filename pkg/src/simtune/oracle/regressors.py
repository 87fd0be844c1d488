"""Native regressors: CART tree, random forest and k-nearest neighbours.

Trees are stored as flat node arrays (feature, threshold, left, right,
value); a forest concatenates its trees and keeps the root offsets.
"""
from __future__ import annotations

import math

import numba
import numpy as np

CRITERIA = ("mse", "mae")
GRIDS = {
    "tree": {"criterion": ["mse", "mae"], "max_depth": [None, 4, 8, 16, 32]},
    "forest": {"n_estimators": [10, 20, 50, 100, 200], "max_features": ["all", "sqrt"],
               "criterion": ["mse", "mae"], "max_depth": [None, 4, 8, 16, 32]},
    "knn": {"n_neighbors": [1, 2, 3, 4, 5, 6], "p": [1, 2]},
}
DEFAULTS = {
    "tree": {"criterion": "mse", "max_depth": None},
    "forest": {"n_estimators": 100, "max_features": "all", "criterion": "mse", "max_depth": None},
    "knn": {"n_neighbors": 5, "p": 2},
}


def check_hyperparams(kind: str, hyper: dict) -> dict:
    """Defaults filled in; unknown kinds, names or off-grid values raise ValueError."""
    if kind not in GRIDS:
        raise ValueError(f"unknown regressor kind {kind!r}")
    out = dict(DEFAULTS[kind])
    for name, value in hyper.items():
        if name not in GRIDS[kind]:
            raise ValueError(f"{kind}: unknown hyperparameter {name!r}")
        if value not in GRIDS[kind][name]:
            raise ValueError(f"{kind}: {name}={value!r} is outside {GRIDS[kind][name]}")
        out[name] = value
    return out


# heap helpers for the running median of the MAE criterion
@numba.njit(cache=True)
def _hpush(h, n, v):
    h[n] = v
    i = n
    while i > 0:
        p = (i - 1) // 2
        if h[p] <= h[i]:
            break
        h[p], h[i] = h[i], h[p]
        i = p
    return n + 1


@numba.njit(cache=True)
def _hpop(h, n):
    top = h[0]
    n -= 1
    h[0] = h[n]
    i = 0
    while True:
        a = 2 * i + 1
        if a >= n:
            break
        b = a + 1
        c = b if b < n and h[b] < h[a] else a
        if h[i] <= h[c]:
            break
        h[i], h[c] = h[c], h[i]
        i = c
    return top, n


@numba.njit(cache=True)
def _prefix_sad(ys, n, out, lo, hi):
    """out[i] = sum |y - median| over the first i of ys[:n]."""
    out[0] = 0.0
    nlo = 0
    nhi = 0
    slo = 0.0
    shi = 0.0
    for i in range(n):
        v = ys[i]
        if nlo == 0 or v <= -lo[0]:
            nlo = _hpush(lo, nlo, -v)  # max-heap stored negated
            slo += v
        else:
            nhi = _hpush(hi, nhi, v)
            shi += v
        if nlo > nhi + 1:
            t, nlo = _hpop(lo, nlo)
            slo += t
            nhi = _hpush(hi, nhi, -t)
            shi -= t
        elif nhi > nlo:
            t, nhi = _hpop(hi, nhi)
            shi -= t
            nlo = _hpush(lo, nlo, -t)
            slo += t
        med = -lo[0]
        out[i + 1] = (med * nlo - slo) + (shi - med * nhi)


@numba.njit(cache=True)
def _build_tree(Xs, ys, criterion, max_depth, max_features, seed):
    """Grow one CART tree on the sample (Xs, ys); rows may repeat (bootstrap).

    Every feature keeps the sample positions sorted by its value; a node is
    the same segment [a, b) of each list, and a split partitions all lists
    stably, so no sorting happens below the root.
    """
    np.random.seed(seed)
    m, n_feat = Xs.shape
    XT = np.ascontiguousarray(Xs.T)  # feature-major for cache-friendly scans
    srt = np.empty((n_feat, m), np.int64)
    for f in range(n_feat):
        srt[f] = np.argsort(XT[f], kind="mergesort")
    cap = 2 * m + 1
    feat = np.full(cap, -1, np.int64)
    thr = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    st_node = np.empty(cap, np.int64)
    st_a = np.empty(cap, np.int64)
    st_b = np.empty(cap, np.int64)
    st_d = np.empty(cap, np.int64)
    fperm = np.arange(n_feat)
    goes_left = np.zeros(m, np.bool_)
    tmp = np.empty(m, np.int64)
    ybuf = np.empty(m)
    pre = np.empty(m + 1)
    suf = np.empty(m + 1)
    hlo = np.empty(m)
    hhi = np.empty(m)
    sp = 1
    st_node[0] = 0
    st_a[0] = 0
    st_b[0] = m
    st_d[0] = 0
    count = 1
    while sp > 0:
        sp -= 1
        node = st_node[sp]
        a = st_a[sp]
        b = st_b[sp]
        depth = st_d[sp]
        n = b - a
        s = 0.0
        s2 = 0.0
        ymin = np.inf
        ymax = -np.inf
        for t in range(a, b):
            v = ys[srt[0, t]]
            ybuf[t - a] = v
            s += v
            s2 += v * v
            ymin = min(ymin, v)
            ymax = max(ymax, v)
        if criterion == 1:
            value[node] = np.median(ybuf[:n])
        else:
            value[node] = s / n
        if n < 2 or (max_depth >= 0 and depth >= max_depth) or ymin == ymax:
            continue
        best_f = -1
        best_cost = np.inf
        best_thr = 0.0
        for i in range(n_feat - 1, 0, -1):  # Fisher-Yates shuffle of the feature order
            j = np.random.randint(0, i + 1)
            fperm[i], fperm[j] = fperm[j], fperm[i]
        inspected = 0
        for fi in range(n_feat):
            if inspected >= max_features and best_f >= 0:
                break
            f = fperm[fi]
            row = srt[f]
            xf = XT[f]
            if xf[row[a]] == xf[row[b - 1]]:
                continue  # constant features do not count towards max_features
            inspected += 1
            if criterion == 1:
                for t in range(n):
                    ybuf[t] = ys[row[a + t]]
                _prefix_sad(ybuf, n, pre, hlo, hhi)
                for t in range(n):
                    ybuf[t] = ys[row[b - 1 - t]]
                _prefix_sad(ybuf, n, suf, hlo, hhi)
            ls = 0.0
            ls2 = 0.0
            for i in range(1, n):
                v = ys[row[a + i - 1]]
                ls += v
                ls2 += v * v
                x0 = xf[row[a + i - 1]]
                x1 = xf[row[a + i]]
                if x0 < x1:
                    if criterion == 1:
                        c = pre[i] + suf[n - i]
                    else:
                        rs = s - ls
                        c = max(ls2 - ls * ls / i, 0.0) + max((s2 - ls2) - rs * rs / (n - i), 0.0)
                    if c < best_cost:
                        best_cost = c
                        best_f = f
                        tv = 0.5 * (x0 + x1)
                        if tv >= x1:
                            tv = x0
                        best_thr = tv
        if best_f < 0:
            continue
        nl = 0
        for t in range(a, b):
            r = srt[0, t]
            goes_left[r] = XT[best_f, r] <= best_thr
            if goes_left[r]:
                nl += 1
        for f in range(n_feat):
            k = 0
            for t in range(a, b):
                r = srt[f, t]
                if goes_left[r]:
                    tmp[k] = r
                    k += 1
            for t in range(a, b):
                r = srt[f, t]
                if not goes_left[r]:
                    tmp[k] = r
                    k += 1
            for t in range(n):
                srt[f, a + t] = tmp[t]
        split = a + nl
        feat[node] = best_f
        thr[node] = best_thr
        left[node] = count
        right[node] = count + 1
        st_node[sp] = count
        st_a[sp] = a
        st_b[sp] = split
        st_d[sp] = depth + 1
        st_node[sp + 1] = count + 1
        st_a[sp + 1] = split
        st_b[sp + 1] = b
        st_d[sp + 1] = depth + 1
        sp += 2
        count += 2
    return feat[:count], thr[:count], left[:count], right[:count], value[:count]


@numba.njit(cache=True)
def _predict_nodes(X, roots, feat, thr, left, right, value):
    n = X.shape[0]
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for r in roots:
            k = r
            while feat[k] >= 0:
                k = left[k] if X[i, feat[k]] <= thr[k] else right[k]
            acc += value[k]
        out[i] = acc / roots.size
    return out


class TreeEnsemble:
    """A single tree or a bagged forest of CART trees."""

    def __init__(self, kind: str, hyper: dict, seed: int = 0):
        self.kind = kind
        self.hyper = check_hyperparams(kind, hyper)
        if kind not in ("tree", "forest"):
            raise ValueError("TreeEnsemble handles tree and forest only")
        self.seed = int(seed)
        self.nodes = None  # (roots, feat, thr, left, right, value)

    def _max_features(self, n_feat: int) -> int:
        if self.kind == "forest" and self.hyper["max_features"] == "sqrt":
            return max(1, int(math.sqrt(n_feat)))
        return n_feat

    def fit(self, X: np.ndarray, y: np.ndarray) -> "TreeEnsemble":
        X = np.ascontiguousarray(X, dtype=float)
        y = np.ascontiguousarray(y, dtype=float)
        n = X.shape[0]
        if n < 1 or y.shape != (n,):
            raise ValueError("bad training shapes")
        crit = CRITERIA.index(self.hyper["criterion"])
        depth = -1 if self.hyper["max_depth"] is None else int(self.hyper["max_depth"])
        mf = self._max_features(X.shape[1])
        parts = []
        if self.kind == "tree":
            parts.append(_build_tree(X, y, crit, depth, mf, self.seed % 2**31))
        else:
            # one independent stream per tree, so trees do not depend on build order
            for child in np.random.SeedSequence(self.seed).spawn(self.hyper["n_estimators"]):
                rng = np.random.default_rng(child)
                rows = np.sort(rng.integers(0, n, n)).astype(np.int64)
                tree_seed = int(rng.integers(0, 2**31 - 1))
                parts.append(_build_tree(X[rows], y[rows], crit, depth, mf, tree_seed))
        self.nodes = _concat(parts)
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self.nodes is None:
            raise RuntimeError("regressor is not fitted")
        return _predict_nodes(np.ascontiguousarray(X, dtype=float), *self.nodes)

    @property
    def n_nodes(self) -> int:
        return int(self.nodes[1].size)

    def to_dict(self) -> dict:
        roots, feat, thr, left, right, value = self.nodes
        return {"kind": self.kind, "hyper": self.hyper, "seed": self.seed, "roots": roots.tolist(),
                "feature": feat.tolist(), "threshold": thr.tolist(), "left": left.tolist(),
                "right": right.tolist(), "value": value.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TreeEnsemble":
        obj = cls(d["kind"], d["hyper"], d["seed"])
        i64 = np.int64
        obj.nodes = (np.array(d["roots"], i64), np.array(d["feature"], i64), np.array(d["threshold"], float),
                     np.array(d["left"], i64), np.array(d["right"], i64), np.array(d["value"], float))
        return obj


def _concat(parts):
    roots, feats, thrs, lefts, rights, values = [], [], [], [], [], []
    offset = 0
    for feat, thr, left, right, value in parts:
        roots.append(offset)
        feats.append(feat)
        thrs.append(thr)
        lefts.append(np.where(left >= 0, left + offset, -1))
        rights.append(np.where(right >= 0, right + offset, -1))
        values.append(value)
        offset += feat.size
    return (np.array(roots, np.int64), np.concatenate(feats), np.concatenate(thrs),
            np.concatenate(lefts), np.concatenate(rights), np.concatenate(values))


@numba.njit(cache=True)
def _knn_predict(Xtr, ytr, Xq, k, p):
    nq = Xq.shape[0]
    ntr = Xtr.shape[0]
    out = np.zeros(nq)
    d = np.empty(ntr)
    for i in range(nq):
        for j in range(ntr):
            acc = 0.0
            for c in range(Xtr.shape[1]):
                diff = abs(Xq[i, c] - Xtr[j, c])
                acc += diff if p == 1 else diff * diff
            d[j] = acc
        order = np.argsort(d, kind="mergesort")  # ties resolved by training order
        s = 0.0
        for t in range(k):
            s += ytr[order[t]]
        out[i] = s / k
    return out


class KNeighbors:
    def __init__(self, hyper: dict, seed: int = 0):
        self.kind = "knn"
        self.hyper = check_hyperparams("knn", hyper)
        self.seed = int(seed)
        self.X = None
        self.y = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> "KNeighbors":
        self.X = np.ascontiguousarray(X, dtype=float)
        self.y = np.ascontiguousarray(y, dtype=float)
        if self.y.shape != (self.X.shape[0],) or self.X.shape[0] < 1:
            raise ValueError("bad training shapes")
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self.X is None:
            raise RuntimeError("regressor is not fitted")
        k = min(self.hyper["n_neighbors"], self.X.shape[0])
        return _knn_predict(self.X, self.y, np.ascontiguousarray(X, dtype=float), k, self.hyper["p"])

    def to_dict(self) -> dict:
        return {"kind": "knn", "hyper": self.hyper, "seed": self.seed, "X": self.X.tolist(), "y": self.y.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "KNeighbors":
        obj = cls(d["hyper"], d["seed"])
        obj.X = np.array(d["X"], dtype=float).reshape(len(d["y"]), -1)
        obj.y = np.array(d["y"], dtype=float)
        return obj


def make_regressor(kind: str, hyper: dict, seed: int = 0):
    if kind == "knn":
        return KNeighbors(hyper, seed)
    return TreeEnsemble(kind, hyper, seed)


def regressor_from_dict(d: dict):
    return KNeighbors.from_dict(d) if d["kind"] == "knn" else TreeEnsemble.from_dict(d)
