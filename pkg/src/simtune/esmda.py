"""Ensemble smoother with multiple data assimilation.

Each round runs the forward model on every member, perturbs the
observations with the inflated error covariance ``alpha * C_D`` and applies
the Kalman-type update

    m_j <- m_j + C_MD (C_DD + alpha C_D)^+ (d_uc,j - d_sim,j)

where ``^+`` is a truncated-SVD pseudo-inverse. The reciprocals of the
inflation factors must sum to one.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ALPHA_TOL = 1e-12


class AlphaScheduleError(ValueError):
    pass


class ForwardFailure(RuntimeError):
    """A forward evaluation failed; ``member`` is the failing column (or None)."""

    def __init__(self, member: int | None, message: str, round_index: int | None = None):
        where = f"member {member}" if member is not None else "forward model"
        if round_index is not None:
            where += f" in round {round_index}"
        super().__init__(f"{where}: {message}")
        self.member = member
        self.round_index = round_index
        self.detail = message


@dataclass
class EnsembleState:
    M: np.ndarray  # (n_params, N_r)
    names: list[str]
    n: int = 0

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        if self.M.ndim != 2 or self.M.shape[1] < 2:
            raise ValueError("ensemble needs shape (n_params, N_r) with N_r >= 2")
        if len(self.names) != self.M.shape[0]:
            raise ValueError("one name per parameter row")
        if not np.all(np.isfinite(self.M)):
            raise ValueError("ensemble contains non-finite entries")

    @property
    def n_members(self) -> int:
        return self.M.shape[1]


@dataclass
class ObservationSet:
    d_obs: np.ndarray
    variances: np.ndarray  # diagonal of C_D
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.d_obs = np.asarray(self.d_obs, dtype=float).ravel()
        self.variances = np.broadcast_to(np.asarray(self.variances, dtype=float), self.d_obs.shape).copy()
        if self.d_obs.size < 1:
            raise ValueError("at least one observation is needed")
        if np.any(self.variances <= 0):
            raise ValueError("observation variances must be positive")
        if not self.labels:
            self.labels = [f"d{i}" for i in range(self.d_obs.size)]
        if len(self.labels) != self.d_obs.size:
            raise ValueError("one label per observation")

    def __len__(self):
        return self.d_obs.size


@dataclass
class AssimilationConfig:
    n_assim: int = 4
    alphas: list[float] | None = None  # default: uniform alpha = n_assim
    seed: int = 0
    svd_tol: float = 1e-8

    def schedule(self) -> list[float]:
        alphas = [float(self.n_assim)] * self.n_assim if self.alphas is None else [float(a) for a in self.alphas]
        if len(alphas) != self.n_assim:
            raise AlphaScheduleError(f"{len(alphas)} inflation factors for {self.n_assim} assimilations")
        validate_alphas(alphas)
        return alphas


def validate_alphas(alphas) -> None:
    a = np.asarray(alphas, dtype=float)
    if a.size == 0:
        raise AlphaScheduleError("empty inflation schedule")
    if np.any(~np.isfinite(a)) or np.any(a <= 0):
        raise AlphaScheduleError("inflation factors must be positive and finite")
    residual = float(np.sum(1.0 / a) - 1.0)
    if abs(residual) > ALPHA_TOL:
        raise AlphaScheduleError(f"sum of 1/alpha differs from 1 by {residual:.3e}")


def perturb_observations(obs: ObservationSet, alpha: float, n_members: int, rng) -> np.ndarray:
    """D_uc with columns d_obs + sqrt(alpha) sqrt(C_D) z_j, z_j standard normal."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    rng = np.random.default_rng(rng)
    z = rng.standard_normal((len(obs), n_members))
    return obs.d_obs[:, None] + np.sqrt(alpha) * np.sqrt(obs.variances)[:, None] * z


def cross_covariance(M: np.ndarray, D: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(C_MD, C_DD) with the unbiased 1/(N_r - 1) normalisation."""
    M = np.asarray(M, dtype=float)
    D = np.asarray(D, dtype=float)
    if M.ndim != 2 or D.ndim != 2 or M.shape[1] != D.shape[1]:
        raise ValueError("M and D need the same number of members (columns)")
    n = M.shape[1]
    if n < 2:
        raise ValueError("need at least two members")
    dm = M - M.mean(axis=1, keepdims=True)
    dd = D - D.mean(axis=1, keepdims=True)
    return dm @ dd.T / (n - 1), dd @ dd.T / (n - 1)


def truncated_pinv(A: np.ndarray, rel_tol: float) -> np.ndarray:
    """Pseudo-inverse keeping singular values >= rel_tol * largest."""
    U, s, Vt = np.linalg.svd(A)
    if s.size == 0 or s[0] == 0:
        return np.zeros(A.T.shape)
    keep = s >= rel_tol * s[0]
    return (Vt[keep].T / s[keep]) @ U[:, keep].T


def kalman_gain(C_MD, C_DD, C_D, alpha: float, svd_tol: float = 1e-8) -> np.ndarray:
    """K = C_MD (alpha C_D + C_DD)^+; ``C_D`` may be the diagonal as a vector."""
    C_MD = np.atleast_2d(np.asarray(C_MD, dtype=float))
    C_DD = np.atleast_2d(np.asarray(C_DD, dtype=float))
    C_D = np.asarray(C_D, dtype=float)
    C_D = np.diag(np.atleast_1d(C_D)) if C_D.ndim <= 1 else C_D
    if C_DD.shape != C_D.shape or C_MD.shape[1] != C_DD.shape[0]:
        raise ValueError("inconsistent covariance shapes")
    for x in (C_MD, C_DD, C_D):
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite covariance entry")
    return C_MD @ truncated_pinv(alpha * C_D + C_DD, svd_tol)


def update_ensemble(M, D_sim, D_uc, K) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    D_sim = np.asarray(D_sim, dtype=float)
    D_uc = np.asarray(D_uc, dtype=float)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if D_sim.shape != D_uc.shape or D_sim.shape[1] != M.shape[1] or K.shape != (M.shape[0], D_sim.shape[0]):
        raise ValueError("shape mismatch in the ensemble update")
    return M + K @ (D_uc - D_sim)


@dataclass
class ForwardContext:
    """What the forward model is asked to evaluate."""

    round_index: int  # 1-based; n_assim + 1 is the forecast
    M: np.ndarray
    forecast: bool


@dataclass
class RoundRecord:
    round_index: int
    alpha: float
    M: np.ndarray  # parameters the forward model ran with
    D_sim: np.ndarray
    D_uc: np.ndarray


@dataclass
class EsmdaLedger:
    alphas: list[float]
    seed: int
    names: list[str]
    labels: list[str]
    rounds: list[RoundRecord] = field(default_factory=list)
    final_M: np.ndarray | None = None
    forecast: np.ndarray | None = None

    @property
    def forward_calls(self) -> int:
        return len(self.rounds) + (self.forecast is not None)

    def manifest(self) -> dict:
        n_params = len(self.names)
        return {"alphas": self.alphas, "seed": self.seed, "n_params": n_params,
                "n_members": None if self.final_M is None else int(self.final_M.shape[1]),
                "n_data": len(self.labels), "rounds": len(self.rounds), "forward_calls": self.forward_calls,
                "parameter_names": self.names, "data_labels": self.labels}

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)

        def dump(name, A, rows):
            with open(os.path.join(directory, name), "w") as fh:
                fh.write(",".join(["name"] + [f"m{j}" for j in range(A.shape[1])]) + "\n")
                for label, r in zip(rows, A):
                    fh.write(",".join([label] + [repr(float(v)) for v in r]) + "\n")

        for r in self.rounds:
            dump(f"round{r.round_index}_M.csv", r.M, self.names)
            dump(f"round{r.round_index}_Dsim.csv", r.D_sim, self.labels)
            dump(f"round{r.round_index}_Duc.csv", r.D_uc, self.labels)
        if self.final_M is not None:
            dump("final_M.csv", self.final_M, self.names)
        if self.forecast is not None:
            dump("forecast_Dsim.csv", self.forecast, self.labels)
        with open(os.path.join(directory, "manifest.json"), "w") as fh:
            json.dump(self.manifest(), fh, indent=1)


Forward = Callable[[ForwardContext], np.ndarray]


def _evaluate(forward: Forward, ctx: ForwardContext, n_data: int) -> np.ndarray:
    try:
        D = forward(ctx)
    except ForwardFailure as exc:
        if exc.round_index is None:
            raise ForwardFailure(exc.member, exc.detail, ctx.round_index) from exc
        raise
    D = np.asarray(D, dtype=float)
    if D.shape != (n_data, ctx.M.shape[1]):
        raise ForwardFailure(None, f"returned shape {D.shape}, expected {(n_data, ctx.M.shape[1])}",
                             ctx.round_index)
    bad = np.flatnonzero(~np.all(np.isfinite(D), axis=0))
    if bad.size:
        raise ForwardFailure(int(bad[0]), "non-finite simulated data", ctx.round_index)
    return D


def run_esmda(initial: EnsembleState, obs: ObservationSet, config: AssimilationConfig,
              forward: Forward) -> tuple[EnsembleState, EsmdaLedger]:
    """N_a assimilation rounds followed by one forecast evaluation.

    The forward model is called exactly N_a + 1 times. Any member failure
    aborts the run with a :class:`ForwardFailure` naming the member.
    """
    alphas = config.schedule()
    rng = np.random.default_rng(config.seed)
    M = initial.M.copy()
    ledger = EsmdaLedger(alphas, config.seed, list(initial.names), list(obs.labels))
    for n, alpha in enumerate(alphas, start=1):
        D = _evaluate(forward, ForwardContext(n, M.copy(), False), len(obs))
        D_uc = perturb_observations(obs, alpha, M.shape[1], rng)
        C_MD, C_DD = cross_covariance(M, D)
        K = kalman_gain(C_MD, C_DD, obs.variances, alpha, config.svd_tol)
        ledger.rounds.append(RoundRecord(n, alpha, M.copy(), D, D_uc))
        M = update_ensemble(M, D, D_uc, K)
    ledger.final_M = M.copy()
    ledger.forecast = _evaluate(forward, ForwardContext(len(alphas) + 1, M.copy(), True), len(obs))
    return EnsembleState(M, list(initial.names), len(alphas)), ledger
