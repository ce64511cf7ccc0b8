"""Random diffusion coefficient, its sampler, and Gauss-Legendre grids."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

VAR = math.exp(-1.125)
DIM = 4
XI_TAG = 0
LEVEL_TAG = 1


def modes(x1, x2) -> np.ndarray:
    """The four spatial modes of the field, stacked along the last axis."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    return np.stack(
        [
            np.cos(1.1 * np.pi * x1),
            np.cos(1.2 * np.pi * x1),
            np.sin(1.3 * np.pi * x2),
            np.sin(1.4 * np.pi * x2),
        ],
        axis=-1,
    )


def coeff_from_modes(xi, mode_values: np.ndarray) -> np.ndarray:
    return 1.0 + np.exp(VAR * (mode_values @ np.asarray(xi, dtype=float)))


def eval_coeff(xi, x, y=None):
    """Diffusion coefficient ``a(x; xi)``.

    ``x`` is either an array of points with trailing dimension 2, or the
    first coordinate with the second passed as ``y``.  Values lie in
    ``[1 + exp(-4 VAR), 1 + exp(4 VAR)]`` for ``xi`` in the unit box.
    """
    if y is None:
        pts = np.asarray(x, dtype=float)
        x, y = pts[..., 0], pts[..., 1]
    return coeff_from_modes(xi, modes(x, y))


def coefficient(xi):
    """Bind ``xi`` and return an evaluator ``(x, y) -> a``."""
    xi = np.array(xi, dtype=float)
    return lambda x, y: eval_coeff(xi, x, y)


COEFF_MIN = 1.0 + math.exp(-4 * VAR)
COEFF_MAX = 1.0 + math.exp(4 * VAR)


# ----------------------------------------------------------------- streams


@dataclass(frozen=True)
class Streams:
    """Counter-based random streams.

    Each draw gets its own generator derived from ``(seed, repetition, j,
    tag, level, index)``, so results never depend on the order in which
    samples are computed.
    """

    seed: int
    repetition: int = 0

    def generator(self, j: int, tag: int, level: int = 0, index: int = 0) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.repetition, j, tag, level, index))
        return np.random.Generator(np.random.Philox(ss))

    def xi(self, j: int, level: int, index: int) -> np.ndarray:
        return sample_xi(self.generator(j, XI_TAG, level, index))

    def level_uniform(self, j: int) -> float:
        return float(self.generator(j, LEVEL_TAG).random())


def sample_xi(stream: np.random.Generator) -> np.ndarray:
    """Four iid uniforms on [-1, 1]."""
    return stream.uniform(-1.0, 1.0, size=DIM)


# -------------------------------------------------------------- quadrature


def _legendre(q: int, x: np.ndarray):
    """Return ``(P_q(x), P_{q-1}(x))`` by the three-term recurrence."""
    p_prev, p = np.ones_like(x), x.copy()
    for m in range(2, q + 1):
        p_prev, p = p, ((2 * m - 1) * x * p - (m - 1) * p_prev) / m
    return p, p_prev


def gauss_legendre(q: int, tol: float = 1e-14, maxiter: int = 100):
    """Nodes and weights of the ``q``-point rule on [-1, 1] by Newton's method."""
    if q < 1 or int(q) != q:
        raise ValueError(f"q must be a positive integer, got {q!r}")
    k = np.arange(1, q + 1)
    x = np.cos(np.pi * (k - 0.25) / (q + 0.5))
    for _ in range(maxiter):
        p, p_prev = _legendre(q, x)
        dp = q * (x * p - p_prev) / (x * x - 1.0)
        dx = p / dp
        x = x - dx
        if np.max(np.abs(dx)) < tol:
            break
    p, p_prev = _legendre(q, x)
    dp = q * (x * p - p_prev) / (x * x - 1.0)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    order = np.argsort(x)
    return x[order], w[order]


@dataclass(frozen=True, eq=False)
class QuadratureGrid:
    nodes: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return self.weights.size


def gl_grid(q: int, dim: int = DIM) -> QuadratureGrid:
    """Tensor Gauss-Legendre grid with probability weights for U([-1,1]^dim)."""
    x, w = gauss_legendre(q)
    w = w / 2.0
    nodes = np.array(list(itertools.product(x, repeat=dim)))
    weights = np.array([math.prod(c) for c in itertools.product(w, repeat=dim)])
    return QuadratureGrid(nodes, weights)
