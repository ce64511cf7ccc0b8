"""Stochastic gradient loops and the quadrature-based reference solver."""
from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import schedules as sch
from .estimators import mlmc_gradient, rmlmc_gradient
from .fem import FeField, build_mesh, l2_inner, l2_norm, prolong
from .field import Streams, gl_grid
from .pde import (
    ProblemData,
    adjoint_state,
    grad_f,
    operator,
    sensitivity_action,
    solve_adjoint,
    solve_primal,
)

log = logging.getLogger(__name__)


@dataclass
class RunTrace:
    """Per-iteration history of one stochastic gradient run.

    Row ``k`` (``j = k + 1``) describes the iterate ``u_{j+1}`` produced by
    iteration ``j``: its level, the cumulative model cost through iteration
    ``j`` and, when a reference was supplied, ``||u_{j+1} - u_ref||``.
    ``initial_error`` is the error of ``u_1``.
    """

    strategy: str
    j: np.ndarray
    level: np.ndarray
    L: np.ndarray
    W: np.ndarray
    solve_cost: np.ndarray
    final: FeField
    error: np.ndarray | None = None
    initial_error: float | None = None
    expected_W: np.ndarray | None = None
    sampled_level: np.ndarray | None = None
    samples: list = field(default_factory=list)
    iterates: list = field(default_factory=list, repr=False)
    meta: dict = field(default_factory=dict)


def control_error(u: FeField, u_ref: FeField) -> float:
    """``||u - u_ref||`` in L2 on the reference level."""
    if u.level > u_ref.level:
        raise ValueError(
            f"iterate on level {u.level} is finer than the reference (level {u_ref.level})"
        )
    return l2_norm(prolong(u, u_ref.level) - u_ref)


def error_vs_reference(trace: RunTrace, u_ref: FeField) -> np.ndarray:
    """Errors of the stored iterates ``u_1, ..., u_{J+1}``.

    Needs a trace recorded with ``keep_iterates=True``.
    """
    if not trace.iterates:
        raise ValueError("trace has no stored iterates; rerun with keep_iterates=True")
    return np.array([control_error(u, u_ref) for u in trace.iterates])


class _Recorder:
    def __init__(self, u_ref, keep_iterates):
        self.u_ref = u_ref
        self.keep = keep_iterates
        self.rows = {k: [] for k in ("j", "level", "L", "W", "solve_cost", "error")}
        self.iterates = []
        self.initial_error = None

    def start(self, u):
        if self.u_ref is not None:
            self.initial_error = control_error(u, self.u_ref)
        if self.keep:
            self.iterates.append(u)

    def add(self, j, u, L, W, solve_cost):
        r = self.rows
        r["j"].append(j)
        r["level"].append(u.level)
        r["L"].append(L)
        r["W"].append(W)
        r["solve_cost"].append(solve_cost)
        if self.u_ref is not None:
            r["error"].append(control_error(u, self.u_ref))
        if self.keep:
            self.iterates.append(u)

    def trace(self, strategy, u, **extra) -> RunTrace:
        r = {k: np.asarray(v) for k, v in self.rows.items()}
        return RunTrace(
            strategy=strategy,
            j=r["j"].astype(int),
            level=r["level"].astype(int),
            L=r["L"].astype(int),
            W=r["W"].astype(float),
            solve_cost=r["solve_cost"].astype(float),
            final=u,
            error=r["error"].astype(float) if self.u_ref is not None else None,
            initial_error=self.initial_error,
            iterates=self.iterates,
            **extra,
        )


def run_mlsg(params: sch.AlgoParams, data: ProblemData, J: int, seed: int, repetition: int = 0,
             u_ref: FeField | None = None, step: Callable | None = None,
             levels: Callable | None = None, samples: Callable | None = None,
             keep_iterates: bool = False, mapper=map, xi_override=None) -> RunTrace:
    """Multilevel stochastic gradient, starting from ``u_1 = 0`` on level 0.

    ``step(j)``, ``levels(j)`` and ``samples(j, L)`` override the schedules.
    """
    if J < 1:
        raise ValueError("need at least one iteration")
    step = step or (lambda j: sch.step_size(params, j))
    levels = levels or (lambda j: sch.mlsg_levels(params, j))
    samples = samples or (lambda j, L: sch.mlsg_samples(params, j, L))
    streams = Streams(seed, repetition)
    u = FeField.zeros(0, data.h0)
    rec = _Recorder(u_ref, keep_iterates)
    rec.start(u)
    history = []
    W = cost = 0.0
    L_prev = 0
    for j in range(1, J + 1):
        L = max(levels(j), L_prev)
        N = samples(j, L)
        out = mlmc_gradient(u, L, N, data, streams, j=j, gamma_d=params.q_c,
                            mapper=mapper, xi_override=xi_override)
        u = prolong(u, out.grad.level) - step(j) * out.grad
        W += sum(sch.level_cost(params, l) * n for l, n in enumerate(N))
        cost += out.model_cost
        history.append(list(N))
        rec.add(j, u, L, W, cost)
        L_prev = L
    return rec.trace(sch.MLSG, u, samples=history,
                     meta={"seed": seed, "repetition": repetition, "params": asdict(params)})


def run_rmlsg(params: sch.AlgoParams, data: ProblemData, J: int, seed: int, repetition: int = 0,
              u_ref: FeField | None = None, step: Callable | None = None,
              levels: Callable | None = None, keep_iterates: bool = False) -> RunTrace:
    """Randomized multilevel stochastic gradient: one level draw per iteration."""
    if J < 1:
        raise ValueError("need at least one iteration")
    step = step or (lambda j: sch.step_size(params, j))
    levels = levels or (lambda j: sch.rmlsg_levels(params, j))
    streams = Streams(seed, repetition)
    u = FeField.zeros(0, data.h0)
    rec = _Recorder(u_ref, keep_iterates)
    rec.start(u)
    drawn, Ls = [], []
    W = cost = 0.0
    L_prev = 0
    for j in range(1, J + 1):
        L = max(levels(j), L_prev)
        pmf = sch.level_pmf(params, L)
        out = rmlmc_gradient(u, L, pmf, data, streams, j=j, gamma_d=params.q_c)
        u = prolong(u, out.grad.level) - step(j) * out.grad
        W += sch.level_cost(params, out.sampled_level)
        cost += out.model_cost
        drawn.append(out.sampled_level)
        Ls.append(L)
        rec.add(j, u, L, W, cost)
        L_prev = L
    return rec.trace(
        sch.RMLSG, u,
        expected_W=sch.rmlsg_expected_cost(params, Ls),
        sampled_level=np.array(drawn, dtype=int),
        meta={"seed": seed, "repetition": repetition, "params": asdict(params)},
    )


def run_rm_baseline(params: sch.AlgoParams, data: ProblemData, level: int, J: int, seed: int,
                    repetition: int = 0, u_ref: FeField | None = None,
                    step: Callable | None = None, xi_override=None,
                    keep_iterates: bool = False) -> RunTrace:
    """Single-sample Robbins-Monro iteration on a fixed level."""
    if J < 1:
        raise ValueError("need at least one iteration")
    step = step or (lambda j: sch.step_size(params, j))
    streams = Streams(seed, repetition)
    u = FeField.zeros(0, data.h0)
    rec = _Recorder(u_ref, keep_iterates)
    rec.start(u)
    W = cost = 0.0
    for j in range(1, J + 1):
        xi = streams.xi(j, 0, 0) if xi_override is None else xi_override
        g = grad_f(level, xi, u, data)
        u = prolong(u, g.level) - step(j) * g
        W += sch.level_cost(params, level)
        cost += 2 * sch.level_cost(params, level)
        rec.add(j, u, level, W, cost)
    return rec.trace("rm-baseline", u,
                     meta={"seed": seed, "repetition": repetition, "level": level})


# ------------------------------------------------------------ reference


@dataclass
class ReferenceSolution:
    control: FeField
    grad_norms: list
    converged: bool
    q: int

    @property
    def grad_norm(self) -> float:
        return self.grad_norms[-1]


# Keep factorizations between iterations while len(grid) * nodes stays below this.
FACTOR_CACHE_LIMIT = 600_000


def full_gradient(u: FeField, level: int, grid, data: ProblemData) -> FeField:
    """``beta u + sum_k w_k p(u, xi_k)`` over a quadrature grid."""
    acc = data.beta * prolong(u, level).coeffs
    for xi, w in zip(grid.nodes, grid.weights):
        acc = acc + w * adjoint_state(level, xi, u, data).coeffs
    return FeField(level, acc, data.h0)


def solve_reference(data: ProblemData, q: int = 3, level: int = 2, max_iters: int = 30,
                    grad_tol: float = 1e-8) -> ReferenceSolution:
    """Deterministic steepest descent on the quadrature-discretized objective.

    The step is the exact line-search minimizer ``||g||^2 / <g, H g>`` of the
    quadratic objective.  Adjoints are updated along the search direction,
    so each iteration costs one factorization and two solves per grid node
    (none when factorizations are cached).
    """
    if q < 1 or level < 0:
        raise ValueError("need q >= 1 and level >= 0")
    grid = gl_grid(q)
    mesh = build_mesh(level, data.h0)
    cache = len(grid) * mesh.num_nodes <= FACTOR_CACHE_LIMIT
    factors = [operator(level, xi, data) for xi in grid.nodes] if cache else None

    def solver(k):
        return factors[k] if cache else operator(level, grid.nodes[k], data)

    u = FeField.zeros(level, data.h0)
    adj = np.array([
        solve_adjoint(level, xi, solve_primal(level, xi, u, data, solver(k)), data, solver(k)).coeffs
        for k, xi in enumerate(grid.nodes)
    ])
    norms = []
    converged = False
    for it in range(max_iters + 1):
        g = FeField(level, data.beta * u.coeffs + grid.weights @ adj, data.h0)
        gn = l2_norm(g)
        norms.append(gn)
        log.debug("reference iteration %d: |grad| = %.3e", it, gn)
        if gn <= grad_tol:
            converged = True
            break
        if it == max_iters:
            break
        dirs = np.array([sensitivity_action(solver(k), level, g) for k in range(len(grid))])
        hg = FeField(level, data.beta * g.coeffs + grid.weights @ dirs, data.h0)
        tau = gn**2 / l2_inner(g, hg)
        u = u - tau * g
        adj -= tau * dirs
    if not converged:
        warnings.warn(f"reference solver stopped after {max_iters} iterations "
                      f"with gradient norm {norms[-1]:.3e}")
    return ReferenceSolution(u, norms, converged, q)


def content_hash(f: FeField) -> str:
    return hashlib.sha256(np.ascontiguousarray(f.coeffs, dtype="<f8").tobytes()).hexdigest()


def save_reference(path, f: FeField, **meta) -> str:
    """Write nodal values as text with a one-line header; returns the content hash."""
    digest = content_hash(f)
    header = {"level": f.level, "h0": f.h0, "nodes": f.coeffs.size, "sha256": digest, **meta}
    fields = " ".join(f"{k}={v}" for k, v in header.items())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(f"# mlsg-reference {fields}\n")
        for v in f.coeffs:
            fh.write(f"{v:.17g}\n")
    return digest


def load_reference(path) -> FeField:
    path = Path(path)
    with open(path) as fh:
        first = fh.readline().split()
        if first[:2] != ["#", "mlsg-reference"]:
            raise ValueError(f"{path} is not a reference control file")
        header = dict(item.split("=", 1) for item in first[2:])
        values = np.loadtxt(fh, dtype=float, ndmin=1)
    if values.size != int(header["nodes"]):
        raise ValueError(f"{path}: expected {header['nodes']} values, found {values.size}")
    f = FeField(int(header["level"]), values, float(header["h0"]))
    if content_hash(f) != header["sha256"]:
        raise ValueError(f"{path}: content hash mismatch")
    return f
