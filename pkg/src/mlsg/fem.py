"""P1 finite elements on nested structured triangulations of the unit square.

Nodes are numbered row by row, ``k = i + (n + 1) * j`` for the grid point
``(i h, j h)``.  Every grid cell is split along its bottom-left to top-right
diagonal, so refining a level by halving ``h`` reproduces the next level
exactly and the P1 spaces are nested.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

# Interior unknowns above this count are solved with Jacobi-preconditioned CG
# instead of a sparse factorization.
DIRECT_SOLVE_LIMIT = 200_000
CG_RTOL = 1e-10


class FemError(ValueError):
    """Raised for invalid meshes, fields or linear systems."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MeshLevel:
    level: int
    h0: float
    h: float
    n: int
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_mask: np.ndarray
    interior: np.ndarray = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)


def _subdivisions(h0: float) -> int:
    if not (h0 > 0 and math.isfinite(h0)):
        raise FemError(f"h0 must be a positive real, got {h0!r}")
    k = -math.log2(h0)
    if k < 1 or abs(k - round(k)) > 1e-12:
        raise FemError(f"h0 must be 2**-k with integer k >= 1, got {h0!r}")
    return 2 ** int(round(k))


def build_mesh(level: int, h0: float = 0.125) -> MeshLevel:
    """Structured right-triangle mesh with ``h = h0 * 2**-level``."""
    if level < 0 or int(level) != level:
        raise FemError(f"level must be a nonnegative integer, got {level!r}")
    return _build_mesh(int(level), _subdivisions(h0))


@lru_cache(maxsize=None)
def _build_mesh(level: int, n0: int) -> MeshLevel:
    n = n0 * 2**level
    h = 1.0 / n
    idx = np.arange(n + 1)
    ii, jj = np.meshgrid(idx, idx, indexing="xy")
    nodes = np.column_stack([ii.ravel() * h, jj.ravel() * h])

    ci, cj = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    bl = (ci + (n + 1) * cj).ravel()
    br = bl + 1
    tl = bl + (n + 1)
    tr = tl + 1
    lower = np.column_stack([bl, br, tr])
    upper = np.column_stack([bl, tr, tl])
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    ib, jb = ii.ravel(), jj.ravel()
    boundary = (ib == 0) | (ib == n) | (jb == 0) | (jb == n)
    return MeshLevel(
        level=level,
        h0=1.0 / n0,
        h=h,
        n=n,
        nodes=_frozen(nodes),
        triangles=_frozen(triangles),
        boundary_mask=_frozen(boundary),
        interior=_frozen(np.flatnonzero(~boundary)),
    )


@dataclass(frozen=True, eq=False)
class FeField:
    """Nodal coefficients of a P1 function on ``build_mesh(level, h0)``."""

    level: int
    coeffs: np.ndarray
    h0: float = 0.125

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        expected = (_subdivisions(self.h0) * 2**self.level + 1) ** 2
        if c.ndim != 1 or c.size != expected:
            raise FemError(
                f"field at level {self.level} needs {expected} coefficients, got {c.shape}"
            )
        object.__setattr__(self, "coeffs", c)

    @property
    def mesh(self) -> MeshLevel:
        return build_mesh(self.level, self.h0)

    @classmethod
    def zeros(cls, level: int, h0: float = 0.125) -> "FeField":
        return cls(level, np.zeros(build_mesh(level, h0).num_nodes), h0)

    @classmethod
    def interpolate(cls, func: Callable, level: int, h0: float = 0.125) -> "FeField":
        mesh = build_mesh(level, h0)
        vals = np.broadcast_to(
            np.asarray(func(mesh.nodes[:, 0], mesh.nodes[:, 1]), dtype=float),
            (mesh.num_nodes,),
        )
        return cls(level, vals.copy(), h0)

    def to(self, level: int) -> "FeField":
        return prolong(self, level)

    def _binary(self, other, op):
        if isinstance(other, FeField):
            lvl = max(self.level, other.level)
            return FeField(lvl, op(self.to(lvl).coeffs, other.to(lvl).coeffs), self.h0)
        return FeField(self.level, op(self.coeffs, other), self.h0)

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, scalar: float):
        return FeField(self.level, self.coeffs * scalar, self.h0)

    __rmul__ = __mul__

    def __neg__(self):
        return FeField(self.level, -self.coeffs, self.h0)


# ---------------------------------------------------------------- assembly


@dataclass(frozen=True, eq=False)
class _Pattern:
    """CSR sparsity and the linear map from per-triangle coefficients to values."""

    indptr: np.ndarray
    indices: np.ndarray
    tri_to_data: sp.csr_matrix
    shape: tuple

    def matrix(self, tri_coeff: np.ndarray) -> sp.csr_matrix:
        data = self.tri_to_data @ tri_coeff
        return sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape)


def _local_gradients(mesh: MeshLevel):
    p = mesh.nodes[mesh.triangles]
    area = mesh.signed_areas()
    # grad phi_a = rot90(p_c - p_b) / (2 area) for cyclic (a, b, c)
    grads = np.empty((mesh.num_triangles, 3, 2))
    for a in range(3):
        b, c = (a + 1) % 3, (a + 2) % 3
        e = p[:, c] - p[:, b]
        grads[:, a, 0] = -e[:, 1]
        grads[:, a, 1] = e[:, 0]
    grads /= (2.0 * area)[:, None, None]
    return grads, area


def _pattern_from_local(mesh: MeshLevel, local: np.ndarray, keep: np.ndarray | None):
    """Build the map from per-triangle weights to CSR data of sum_t w_t local_t.

    ``keep`` optionally restricts rows/cols to a node subset (renumbered).
    """
    ntri = mesh.num_triangles
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    vals = local.reshape(ntri * 9)
    tri = np.repeat(np.arange(ntri), 9)
    size = mesh.num_nodes
    if keep is not None:
        renum = -np.ones(mesh.num_nodes, dtype=np.int64)
        renum[keep] = np.arange(keep.size)
        rows, cols = renum[rows], renum[cols]
        ok = (rows >= 0) & (cols >= 0)
        rows, cols, vals, tri = rows[ok], cols[ok], vals[ok], tri[ok]
        size = keep.size
    key = rows * size + cols
    ukey, pos = np.unique(key, return_inverse=True)
    urow, ucol = np.divmod(ukey, size)
    indptr = np.zeros(size + 1, dtype=np.int64)
    np.add.at(indptr, urow + 1, 1)
    indptr = np.cumsum(indptr)
    tri_to_data = sp.csr_matrix((vals, (pos, tri)), shape=(ukey.size, ntri))
    tri_to_data.sum_duplicates()
    return _Pattern(indptr, ucol.astype(np.int32), tri_to_data, (size, size))


@lru_cache(maxsize=None)
def _stiffness_patterns(level: int, n0: int):
    mesh = _build_mesh(level, n0)
    grads, area = _local_gradients(mesh)
    local = np.einsum("tad,tbd->tab", grads, grads) * area[:, None, None]
    return (
        _pattern_from_local(mesh, local, None),
        _pattern_from_local(mesh, local, mesh.interior),
    )


def _mesh_key(mesh: MeshLevel):
    return mesh.level, mesh.n // 2**mesh.level


def triangle_coefficients(mesh: MeshLevel, coeff: Callable) -> np.ndarray:
    """Evaluate ``coeff`` at triangle centroids; every value must be positive."""
    c = mesh.centroids()
    vals = np.broadcast_to(
        np.asarray(coeff(c[:, 0], c[:, 1]), dtype=float), (mesh.num_triangles,)
    )
    if not np.all(vals > 0):
        raise FemError("diffusion coefficient must be strictly positive")
    return vals


def assemble_stiffness(mesh: MeshLevel, coeff: Callable) -> sp.csr_matrix:
    """Full (boundary included) stiffness matrix with centroid quadrature."""
    full, _ = _stiffness_patterns(*_mesh_key(mesh))
    return full.matrix(triangle_coefficients(mesh, coeff))


def interior_stiffness(mesh: MeshLevel, tri_coeff: np.ndarray) -> sp.csr_matrix:
    """Stiffness restricted to interior nodes, from per-triangle coefficients."""
    _, inner = _stiffness_patterns(*_mesh_key(mesh))
    return inner.matrix(tri_coeff)


@lru_cache(maxsize=None)
def _mass(level: int, n0: int) -> sp.csr_matrix:
    mesh = _build_mesh(level, n0)
    area = mesh.signed_areas()
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = area[:, None, None] * ref[None]
    m = _pattern_from_local(mesh, local, None).matrix(np.ones(mesh.num_triangles))
    m.data.setflags(write=False)
    return m


def assemble_mass(mesh: MeshLevel) -> sp.csr_matrix:
    """Consistent P1 mass matrix over all nodes."""
    return _mass(*_mesh_key(mesh)).copy()


def mass_matrix(mesh: MeshLevel) -> sp.csr_matrix:
    # shared read-only instance for hot paths
    return _mass(*_mesh_key(mesh))


# ------------------------------------------------------------------ solves


class DirichletSolver:
    """Factorization of the interior block of a stiffness matrix.

    One factorization serves any number of right-hand sides, which is how the
    primal and adjoint solves of a single realization share work.
    """

    def __init__(self, a_int: sp.spmatrix, mesh: MeshLevel):
        self.mesh = mesh
        self.a_int = sp.csc_matrix(a_int)
        n = self.a_int.shape[0]
        if n != mesh.interior.size:
            raise FemError("matrix size does not match the mesh interior")
        self._lu = None
        if n <= DIRECT_SOLVE_LIMIT:
            try:
                self._lu = spla.splu(
                    self.a_int,
                    permc_spec="MMD_AT_PLUS_A",
                    diag_pivot_thresh=0.0,
                    options={"SymmetricMode": True},
                )
            except RuntimeError as exc:
                raise FemError(f"factorization failed: {exc}") from exc
            if np.any(self._lu.U.diagonal() <= 0):
                raise FemError("stiffness matrix is not positive definite on the interior")
        else:
            self._diag = self.a_int.diagonal()
            if np.any(self._diag <= 0):
                raise FemError("stiffness matrix is not positive definite on the interior")

    def solve_interior(self, rhs_int: np.ndarray) -> np.ndarray:
        if self._lu is not None:
            return self._lu.solve(rhs_int)
        precond = spla.LinearOperator(self.a_int.shape, matvec=lambda v: v / self._diag)
        x, info = spla.cg(self.a_int, rhs_int, rtol=CG_RTOL, atol=0.0, M=precond,
                          maxiter=10 * rhs_int.size)
        if info != 0:
            raise FemError(f"conjugate gradients did not converge (info={info})")
        return x

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve with a full-length load vector; boundary values are zero."""
        out = np.zeros(self.mesh.num_nodes)
        if np.any(rhs):
            out[self.mesh.interior] = self.solve_interior(rhs[self.mesh.interior])
        return out


def solve_dirichlet(a: sp.spmatrix, rhs: np.ndarray, mesh: MeshLevel) -> FeField:
    """Solve ``A u = rhs`` on interior nodes with homogeneous Dirichlet data."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (mesh.num_nodes,) or a.shape != (mesh.num_nodes, mesh.num_nodes):
        raise FemError("matrix/rhs size does not match the mesh")
    a = sp.csr_matrix(a)
    a_int = a[mesh.interior][:, mesh.interior]
    coeffs = DirichletSolver(a_int, mesh).solve(rhs)
    return FeField(mesh.level, coeffs, mesh.h0)


# ------------------------------------------------------- transfer and norms


@lru_cache(maxsize=None)
def _prolong_step(level: int, n0: int) -> sp.csr_matrix:
    """Interpolation from ``level`` to ``level + 1``."""
    nc = n0 * 2**level
    nf = 2 * nc
    I, J = np.meshgrid(np.arange(nf + 1), np.arange(nf + 1), indexing="xy")
    I, J = I.ravel(), J.ravel()
    fine = I + (nf + 1) * J

    def coarse(i, j):
        return i + (nc + 1) * j

    rows, cols, vals = [], [], []
    ee = (I % 2 == 0) & (J % 2 == 0)
    rows.append(fine[ee]); cols.append(coarse(I[ee] // 2, J[ee] // 2)); vals.append(np.ones(ee.sum()))
    # odd coordinates sit at edge midpoints; the (odd, odd) case lies on the diagonal
    for mask, (di0, dj0), (di1, dj1) in (
        ((I % 2 == 1) & (J % 2 == 0), (-1, 0), (1, 0)),
        ((I % 2 == 0) & (J % 2 == 1), (0, -1), (0, 1)),
        ((I % 2 == 1) & (J % 2 == 1), (-1, -1), (1, 1)),
    ):
        for di, dj in ((di0, dj0), (di1, dj1)):
            rows.append(fine[mask])
            cols.append(coarse((I[mask] + di) // 2, (J[mask] + dj) // 2))
            vals.append(np.full(mask.sum(), 0.5))
    p = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=((nf + 1) ** 2, (nc + 1) ** 2),
    )
    return p


@lru_cache(maxsize=None)
def prolongation_matrix(p: int, q: int, h0: float = 0.125) -> sp.csr_matrix:
    """Sparse interpolation operator from level ``p`` to level ``q >= p``."""
    if q < p:
        raise FemError(f"cannot prolong from level {p} down to level {q}")
    n0 = _subdivisions(h0)
    out = sp.identity((n0 * 2**p + 1) ** 2, format="csr")
    for lvl in range(p, q):
        out = _prolong_step(lvl, n0) @ out
    return out.tocsr()


def prolong(f: FeField, q: int) -> FeField:
    """Represent ``f`` on the finer level ``q`` (exact for nested P1)."""
    if q < f.level:
        raise FemError(f"cannot prolong from level {f.level} down to level {q}")
    if q == f.level:
        return f
    return FeField(q, prolongation_matrix(f.level, q, f.h0) @ f.coeffs, f.h0)


def load_vector(f: FeField, level: int) -> np.ndarray:
    """Entries ``<f, phi_k>`` for the P1 basis of ``level``.

    ``f`` may live on a coarser or a finer level; for a finer level the exact
    inner products are gathered through the transpose of the interpolation.
    """
    if f.level <= level:
        return mass_matrix(build_mesh(level, f.h0)) @ prolong(f, level).coeffs
    fine = mass_matrix(f.mesh) @ f.coeffs
    return prolongation_matrix(level, f.level, f.h0).T @ fine


def l2_inner(u: FeField, v: FeField) -> float:
    if u.level != v.level or u.h0 != v.h0:
        raise FemError(f"level mismatch: {u.level} vs {v.level}")
    return float(u.coeffs @ (mass_matrix(u.mesh) @ v.coeffs))


def l2_norm(u: FeField) -> float:
    return math.sqrt(max(l2_inner(u, u), 0.0))
