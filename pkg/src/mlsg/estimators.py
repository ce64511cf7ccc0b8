"""Multilevel gradient estimators, level screening and sample allocation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fem import FeField, build_mesh, l2_norm, prolong
from .field import Streams
from .pde import ProblemData, adjoint_state
from .schedules import ceil_snap


@dataclass
class MlmcOutput:
    grad: FeField
    model_cost: float
    samples_used: list[int]
    sampled_level: int | None = None


@dataclass
class LevelStats:
    """Second moments of coupled gradient differences per level.

    ``moments[0]`` is the raw second moment on level 0; ``moments[l]`` for
    ``l >= 1`` is the mean squared norm of the level ``l`` / ``l - 1``
    difference.
    """

    moments: np.ndarray
    h: np.ndarray
    M: int
    samples: list = field(default_factory=list, repr=False)

    @property
    def diff_levels(self) -> np.ndarray:
        return np.arange(1, self.moments.size)


def pair_cost(level: int, gamma_d: float) -> float:
    """Model cost of one coupled difference (primal and adjoint on each mesh)."""
    c = 2.0 ** (level * gamma_d)
    if level > 0:
        c += 2.0 ** ((level - 1) * gamma_d)
    return 2.0 * c


def coupled_difference(level: int, xi, u: FeField, data: ProblemData) -> FeField:
    """``p^{h_l}(u, xi) - p^{h_{l-1}}(u, xi)`` on level ``l``; ``p^{h_{-1}} = 0``."""
    fine = adjoint_state(level, xi, u, data)
    if level == 0:
        return fine
    coarse = prolong(adjoint_state(level - 1, xi, u, data), level)
    return FeField(level, fine.coeffs - coarse.coeffs, data.h0)


def _ordered_sum(parts, level: int, h0: float) -> np.ndarray:
    acc = np.zeros(build_mesh(level, h0).num_nodes)
    for p in parts:
        acc += prolong(p, level).coeffs
    return acc


def mlmc_gradient(u: FeField, L: int, N, data: ProblemData, streams: Streams,
                  j: int = 1, gamma_d: float = 2.0, mapper=map, xi_override=None) -> MlmcOutput:
    """Multilevel estimate of ``beta u + E[p(u)]`` on level ``max(L, u.level)``.

    Sample ``i`` of level ``l`` at iteration ``j`` draws its realization from
    ``streams.xi(j, l, i)`` and both solves of the difference use it.
    ``mapper`` may be any order-preserving ``map`` (e.g. ``Executor.map``);
    the reduction always runs in (level, index) order.  ``xi_override``
    forces one realization for every sample.
    """
    N = [int(n) for n in N]
    if not N:
        raise ValueError("empty sample vector")
    if len(N) != L + 1:
        raise ValueError(f"need {L + 1} sample counts, got {len(N)}")
    if min(N) < 1:
        raise ValueError("every level needs at least one sample")

    tasks = [(l, i) for l in range(L + 1) for i in range(N[l])]

    def sample(task):
        l, i = task
        xi = streams.xi(j, l, i) if xi_override is None else xi_override
        return coupled_difference(l, xi, u, data)

    diffs = list(mapper(sample, tasks))
    top = max(L, u.level)
    acc = np.zeros(build_mesh(top, data.h0).num_nodes)
    pos = 0
    for l in range(L + 1):
        level_sum = _ordered_sum(diffs[pos:pos + N[l]], l, data.h0)
        pos += N[l]
        acc += prolong(FeField(l, level_sum / N[l], data.h0), top).coeffs
    grad = FeField(top, data.beta * prolong(u, top).coeffs + acc, data.h0)
    cost = sum(n * pair_cost(l, gamma_d) for l, n in enumerate(N))
    return MlmcOutput(grad, cost, N)


def sample_level(pmf: np.ndarray, uniform: float) -> int:
    cdf = np.cumsum(pmf)
    return int(min(np.searchsorted(cdf, uniform, side="right"), len(pmf) - 1))


def _check_pmf(pmf) -> np.ndarray:
    pmf = np.asarray(pmf, dtype=float)
    if pmf.ndim != 1 or pmf.size == 0 or np.any(pmf <= 0) or abs(pmf.sum() - 1.0) > 1e-12:
        raise ValueError(f"invalid level pmf {pmf!r}")
    return pmf


def rmlmc_term(u: FeField, level: int, pmf, xi, data: ProblemData, top: int | None = None) -> FeField:
    """``beta u + (p_l - p_{l-1}) / pmf[l]`` represented on ``top``."""
    pmf = _check_pmf(pmf)
    top = max(len(pmf) - 1, u.level) if top is None else top
    diff = coupled_difference(level, xi, u, data)
    coeffs = data.beta * prolong(u, top).coeffs + prolong(diff, top).coeffs / pmf[level]
    return FeField(top, coeffs, data.h0)


def rmlmc_gradient(u: FeField, L: int, pmf, data: ProblemData, streams: Streams,
                   j: int = 1, gamma_d: float = 2.0) -> MlmcOutput:
    """Randomized single-term estimate; the level is drawn from ``pmf``."""
    pmf = _check_pmf(pmf)
    if pmf.size != L + 1:
        raise ValueError(f"pmf has {pmf.size} entries, expected {L + 1}")
    level = sample_level(pmf, streams.level_uniform(j))
    xi = streams.xi(j, 0, 0)
    grad = rmlmc_term(u, level, pmf, xi, data, top=max(L, u.level))
    used = [0] * (L + 1)
    used[level] = 1
    return MlmcOutput(grad, pair_cost(level, gamma_d), used, sampled_level=level)


def screen_levels(u: FeField, L_max: int, M: int, data: ProblemData, streams: Streams,
                  keep_samples: bool = False) -> LevelStats:
    """Estimate second moments of coupled differences at a fixed control.

    Realizations come from iteration slot ``j = 0`` of ``streams``; sample
    ``i`` is shared across all levels.
    """
    if M < 2:
        raise ValueError(f"screening needs M >= 2 samples, got {M}")
    raw = []
    for i in range(M):
        xi = streams.xi(0, 0, i)
        grads = [data.beta * prolong(u, max(l, u.level)) + adjoint_state(l, xi, u, data)
                 for l in range(L_max + 1)]
        row = [l2_norm(grads[0]) ** 2]
        for l in range(1, L_max + 1):
            top = max(l, u.level)
            row.append(l2_norm(grads[l].to(top) - grads[l - 1].to(top)) ** 2)
        raw.append(row)
    raw = np.array(raw)
    moments = raw.mean(axis=0)
    h = data.h0 * 2.0 ** -np.arange(L_max + 1)
    return LevelStats(moments, h, M, raw if keep_samples else [])


def fit_rate_constant(stats: LevelStats, exponent: float = 4.0) -> float:
    """Constant ``C`` of ``E_l = C h_l**exponent`` by log-space least squares."""
    e = stats.moments[1:]
    h = stats.h[1:]
    ok = e > 0
    if not np.any(ok):
        raise ValueError("all level differences are zero; rate constant undefined")
    return float(np.exp(np.mean(np.log(e[ok]) - exponent * np.log(h[ok]))))


def level_slope(stats: LevelStats) -> float:
    """Least squares slope of ``log2 E_l`` against ``l`` over difference levels."""
    l = stats.diff_levels
    e = stats.moments[1:]
    if l.size < 2:
        raise ValueError("need at least two difference levels for a slope")
    return float(np.polyfit(l, np.log2(e), 1)[0])


def optimal_sample_sizes(tol: float, V, C) -> np.ndarray:
    """Classical MLMC allocation ``ceil(tol^-2 sqrt(V_l/C_l) sum_k sqrt(V_k C_k))``."""
    V = np.asarray(V, dtype=float)
    C = np.asarray(C, dtype=float)
    if not tol > 0:
        raise ValueError("tol must be positive")
    if np.any(C <= 0):
        raise ValueError("costs must be positive")
    if np.any(V < 0):
        raise ValueError("variances must be nonnegative")
    total = np.sum(np.sqrt(V * C))
    raw = tol**-2 * np.sqrt(V / C) * total
    return np.array([ceil_snap(x) for x in raw], dtype=int)

