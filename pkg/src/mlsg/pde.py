"""State, adjoint, loss, gradient and Hessian action for one realization."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from .fem import (
    DirichletSolver,
    FeField,
    build_mesh,
    interior_stiffness,
    l2_norm,
    load_vector,
    mass_matrix,
)
from .field import QuadratureGrid, coeff_from_modes, modes


def _sine_target(x, y):
    return np.sin(np.pi * x) * np.sin(np.pi * y)


def _unit_source(x, y):
    return np.ones_like(x)


@dataclass(frozen=True, eq=False)
class ProblemData:
    beta: float = 1e-4
    g: Callable = _unit_source
    z_d: Callable = _sine_target
    h0: float = 0.125
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be strictly positive, got {self.beta!r}")

    def source(self, level: int) -> FeField:
        return self._interp("g", self.g, level)

    def target(self, level: int) -> FeField:
        return self._interp("z", self.z_d, level)

    def _interp(self, name, func, level):
        key = (name, level)
        if key not in self._cache:
            self._cache[key] = FeField.interpolate(func, level, self.h0)
        return self._cache[key]


@lru_cache(maxsize=None)
def _centroid_modes(level: int, h0: float) -> np.ndarray:
    c = build_mesh(level, h0).centroids()
    return modes(c[:, 0], c[:, 1])


def operator(level: int, xi, data: ProblemData) -> DirichletSolver:
    """Factorized stiffness operator for the realization ``xi`` at ``level``."""
    mesh = build_mesh(level, data.h0)
    a_t = coeff_from_modes(xi, _centroid_modes(level, data.h0))
    return DirichletSolver(interior_stiffness(mesh, a_t), mesh)


def _state(solver: DirichletSolver, level: int, u: FeField, data: ProblemData, with_source=True):
    rhs = load_vector(u, level)
    if with_source:
        rhs = rhs + mass_matrix(solver.mesh) @ data.source(level).coeffs
    return solver.solve(rhs)


def solve_primal(level: int, xi, u: FeField, data: ProblemData, solver=None) -> FeField:
    """FE state for control ``u``; ``u`` may live on any level of the hierarchy."""
    solver = solver or operator(level, xi, data)
    return FeField(level, _state(solver, level, u, data), data.h0)


def solve_adjoint(level: int, xi, y: FeField, data: ProblemData, solver=None) -> FeField:
    if y.level != level:
        raise ValueError(f"state lives on level {y.level}, expected {level}")
    solver = solver or operator(level, xi, data)
    m = mass_matrix(solver.mesh)
    return FeField(level, solver.solve(m @ (y.coeffs - data.target(level).coeffs)), data.h0)


def adjoint_state(level: int, xi, u: FeField, data: ProblemData) -> FeField:
    """Adjoint ``p^h(u)`` with primal and adjoint sharing one factorization."""
    solver = operator(level, xi, data)
    y = solve_primal(level, xi, u, data, solver)
    return solve_adjoint(level, xi, y, data, solver)


def grad_f(level: int, xi, u: FeField, data: ProblemData) -> FeField:
    """``beta u + p^h(u)``, represented on ``max(level, u.level)``."""
    return data.beta * u + adjoint_state(level, xi, u, data)


def eval_f(level: int, xi, u: FeField, data: ProblemData) -> float:
    y = solve_primal(level, xi, u, data)
    misfit = l2_norm(y - data.target(level))
    return 0.5 * misfit**2 + 0.5 * data.beta * l2_norm(u) ** 2


def _as_grid(xi_or_grid) -> QuadratureGrid:
    if isinstance(xi_or_grid, QuadratureGrid):
        return xi_or_grid
    xi = np.asarray(xi_or_grid, dtype=float).reshape(1, -1)
    return QuadratureGrid(xi, np.ones(1))


def sensitivity_action(solver: DirichletSolver, level: int, v: FeField) -> np.ndarray:
    """Nodal values of ``S* M S v`` for the realization behind ``solver``."""
    sv = solver.solve(load_vector(v, level))
    return solver.solve(mass_matrix(solver.mesh) @ sv)


def hessian_action(level: int, xi_or_grid, v: FeField, data: ProblemData) -> FeField:
    """``beta v + sum_k w_k S_k* S_k v`` over one realization or a grid."""
    if v.level != level:
        raise ValueError(f"direction lives on level {v.level}, expected {level}")
    grid = _as_grid(xi_or_grid)
    acc = np.zeros_like(v.coeffs)
    for xi, w in zip(grid.nodes, grid.weights):
        acc += w * sensitivity_action(operator(level, xi, data), level, v)
    return FeField(level, data.beta * v.coeffs + acc, data.h0)


POINCARE = 1.0 / (math.pi * math.sqrt(2.0))


def lipschitz_bound(data: ProblemData, a_min: float) -> float:
    """Mesh-independent Lipschitz constant of the pointwise gradient."""
    return data.beta + POINCARE**4 / a_min**2
