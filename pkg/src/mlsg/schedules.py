"""Closed-form schedules: step sizes, level sequences, sample counts, level pmf, cost."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MLSG = "mlsg"
RMLSG = "rmlsg"


def ceil_snap(x: float) -> int:
    # values that are integers up to roundoff must not be bumped to the next integer
    r = round(x)
    if abs(x - r) <= 1e-9 * max(1.0, abs(x)):
        return int(r)
    return int(math.ceil(x))


@dataclass(frozen=True)
class AlgoParams:
    """Every scalar the schedules need; defaults are the MLSG test-case values.

    ``eps0_sq`` and ``sigma0_sq`` left as ``None`` resolve to
    ``C_star * h0**(2r+2)`` and ``(2 tau0 + 2/l) / (2 tau0) * eps0_sq``.
    """

    beta: float = 1e-4
    tau0: float | None = None
    alpha: float = 10.0
    eta: float = 3.0
    eps0_sq: float | None = None
    sigma0_sq: float | None = None
    h0: float = 0.125
    r: int = 1
    d: int = 2
    gamma: float = 1.0
    C_star: float = 0.5
    C_tilde: float | None = None
    strategy: str = MLSG

    def __post_init__(self):
        if self.tau0 is None:
            object.__setattr__(self, "tau0", 2.0 / self.beta)
        if self.C_tilde is None:
            object.__setattr__(self, "C_tilde", self.C_star)
        if self.eps0_sq is None:
            object.__setattr__(self, "eps0_sq", self.C_star * self.h0 ** self.q_s)
        if self.sigma0_sq is None:
            lam, mu = 2.0, 2.0 * self.tau0 + 2.0 / self.l_convex
            object.__setattr__(self, "sigma0_sq", mu / (lam * self.tau0) * self.eps0_sq)
        self.validate()

    @property
    def l_convex(self) -> float:
        return 2.0 * self.beta

    @property
    def q_s(self) -> float:
        return 2 * self.r + 2

    @property
    def q_c(self) -> float:
        return self.gamma * self.d

    def validate(self):
        if self.strategy not in (MLSG, RMLSG):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        for name in ("beta", "tau0", "eps0_sq", "sigma0_sq", "h0", "C_star", "C_tilde"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if not self.tau0 * self.l_convex > 2:
            raise ValueError(f"tau0 * l = {self.tau0 * self.l_convex} must exceed 2")
        if not self.eta > 1:
            raise ValueError("eta must exceed 1")
        if self.eps0_sq > self.C_star * self.h0 ** self.q_s * (1 + 1e-12):
            warnings.warn("eps0_sq exceeds C_star * h0**(2r+2); L_1 will be positive")
        if self.strategy == MLSG and self.q_s > self.q_c:
            if self.eta < mlsg_eta_min(self) - 1e-12:
                raise ValueError(f"eta must be >= {mlsg_eta_min(self)} for MLSG")
        if self.strategy == RMLSG:
            if not self.eta < (3 * self.q_s + self.q_c) / (self.q_s + self.q_c):
                raise ValueError("eta too large for RMLSG")


def default_params(strategy: str = MLSG, **overrides) -> AlgoParams:
    eta = 3.0 if strategy == MLSG else 2.0
    overrides.setdefault("eta", eta)
    return AlgoParams(strategy=strategy, **overrides)


def mlsg_eta_min(params: AlgoParams) -> float:
    qs, qc = params.q_s, params.q_c
    return (2 * qs - qc) / (qs - qc)


def step_size(params: AlgoParams, j: int) -> float:
    if j < 1:
        raise ValueError("iterations start at j = 1")
    return params.tau0 / (j + params.alpha)


def _levels(params: AlgoParams, eps_sq: float) -> int:
    arg = (1.0 / params.h0) * (eps_sq / params.C_star) ** (1.0 / params.q_s)
    return max(0, ceil_snap(-math.log2(arg)))


def mlsg_levels(params: AlgoParams, j: int) -> int:
    """Finest level ``L_j`` so the bias decays like ``j**(1 - eta)``."""
    if j < 1:
        raise ValueError("iterations start at j = 1")
    return _levels(params, params.eps0_sq * float(j) ** (1.0 - params.eta))


def mlsg_samples(params: AlgoParams, j: int, L: int) -> list[int]:
    """Per-level sample counts ``N_{j,0..L}``."""
    qs, qc = params.q_s, params.q_c
    total = sum(2.0 ** (-k * (qs - qc) / 2) for k in range(L + 1))
    pre = (
        float(j) ** (params.eta - 2)
        * 2.0
        * params.C_tilde
        * params.h0**qs
        / params.sigma0_sq
        * total
    )
    return [max(1, ceil_snap(pre * 2.0 ** (-l * (qs + qc) / 2))) for l in range(L + 1)]


def rmlsg_levels(params: AlgoParams, j: int) -> int:
    if j < 1:
        raise ValueError("iterations start at j = 1")
    return _levels(params, params.eps0_sq / float(j))


def level_pmf(params: AlgoParams, L: int) -> np.ndarray:
    qs, qc = params.q_s, params.q_c
    if not qs > qc:
        warnings.warn("2r+2 <= gamma d: randomized estimator variance is not bounded")
    w = 2.0 ** (-np.arange(L + 1) * (qs + qc) / 2)
    return w / w.sum()


def level_cost(params: AlgoParams, l: int) -> float:
    """Model cost ``2**(l gamma d)`` of one solve on level ``l``."""
    return 2.0 ** (l * params.q_c)


def mlsg_cost(params: AlgoParams, samples: Sequence[Sequence[int]]) -> np.ndarray:
    """Cumulative ``W_j = sum_i sum_l 2**(l gamma d) N_{l,i}``."""
    per = [sum(level_cost(params, l) * n for l, n in enumerate(N)) for N in samples]
    return np.cumsum(per)


def rmlsg_expected_cost(params: AlgoParams, levels: Sequence[int]) -> np.ndarray:
    """Cumulative ``E[W_j] = sum_i sum_k 2**(k gamma d) p_k^i``."""
    per = []
    for L in levels:
        p = level_pmf(params, L)
        per.append(float(np.dot(p, [level_cost(params, k) for k in range(L + 1)])))
    return np.cumsum(per)


def rmlsg_realized_cost(params: AlgoParams, sampled_levels: Sequence[int]) -> np.ndarray:
    return np.cumsum([level_cost(params, l) for l in sampled_levels])


def cost_models(params: AlgoParams, *, samples=None, levels=None, sampled_levels=None) -> dict:
    """Cost bookkeeping for a schedule history.

    ``samples`` (MLSG per-iteration sample vectors) gives ``W``.  ``levels``
    (RMLSG ``L_j``) gives ``expected_W``.  ``sampled_levels`` is a 2D array
    (repetitions x iterations) of drawn levels and gives the empirical mean,
    variance and coefficient of variation of the cumulative cost.
    """
    out = {}
    if samples is not None:
        out["W"] = mlsg_cost(params, samples)
    if levels is not None:
        out["expected_W"] = rmlsg_expected_cost(params, levels)
    if sampled_levels is not None:
        runs = np.array([rmlsg_realized_cost(params, row) for row in np.atleast_2d(sampled_levels)])
        mean = runs.mean(axis=0)
        var = runs.var(axis=0, ddof=1) if runs.shape[0] > 1 else np.zeros_like(mean)
        out["mean_W"] = mean
        out["var_W"] = var
        out["cv_W"] = np.sqrt(var) / mean
    return out
