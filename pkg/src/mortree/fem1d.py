"""P1 finite elements on a uniform mesh of the unit interval.

Only interior unknowns are kept (homogeneous Dirichlet conditions are
eliminated), so every vector here has ``num_cells - 1`` entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class MeshError(ValueError):
    """Raised for an invalid mesh or a mesh mismatch."""


class AssemblyError(RuntimeError):
    """Raised when a coefficient evaluates to a non-finite value."""


class SolverError(RuntimeError):
    """Raised when a tridiagonal factorization meets a zero pivot."""


_GAUSS_NODES = np.array([-1.0, 1.0]) / np.sqrt(3.0)


@dataclass(frozen=True)
class UniformMesh1D:
    num_cells: int

    def __post_init__(self):
        if int(self.num_cells) != self.num_cells or self.num_cells < 2:
            raise MeshError(f"num_cells must be an integer >= 2, got {self.num_cells!r}")

    @property
    def h(self) -> float:
        return 1.0 / self.num_cells

    @property
    def num_interior(self) -> int:
        return self.num_cells - 1

    @cached_property
    def nodes(self) -> np.ndarray:
        """Interior node coordinates ``j * h``, ``j = 1 .. num_cells - 1``."""
        return np.arange(1, self.num_cells) * self.h

    @cached_property
    def stiffness(self) -> "TridiagonalMatrix":
        """Unit-coefficient stiffness matrix; the Gram matrix of ``v_inner``."""
        n = self.num_interior
        inv_h = 1.0 / self.h
        return TridiagonalMatrix(
            np.full(n - 1, -inv_h), np.full(n, 2.0 * inv_h), np.full(n - 1, -inv_h)
        )

    def quadrature(self, breakpoints=()) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Two-point Gauss rule per cell, with cells split at ``breakpoints``.

        Returns ``(points, weights, cell_ids)``; summing ``weights * g(points)``
        per ``cell_ids`` integrates ``g`` over each cell.
        """
        edges = np.arange(self.num_cells + 1) * self.h
        cuts = [float(b) for b in breakpoints if 0.0 < b < 1.0]
        edges = np.unique(np.concatenate([edges, cuts]))
        lo, hi = edges[:-1], edges[1:]
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        ids = np.minimum((mid / self.h).astype(int), self.num_cells - 1)
        points = (mid[:, None] + half[:, None] * _GAUSS_NODES[None, :]).ravel()
        weights = np.repeat(half, 2)
        return points, weights, np.repeat(ids, 2)

    def _quadrature_cached(self, breakpoints: tuple):
        cache = self.__dict__.setdefault("_quad_cache", {})
        if breakpoints not in cache:
            cache[breakpoints] = self.quadrature(breakpoints)
        return cache[breakpoints]


def build_mesh(num_cells: int) -> UniformMesh1D:
    return UniformMesh1D(num_cells)


@dataclass(frozen=True)
class TridiagonalMatrix:
    """Tridiagonal matrix stored by bands.

    ``lower[i]`` is entry ``(i + 1, i)`` and ``upper[i]`` is entry ``(i, i + 1)``.
    """

    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray
    _lu: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.diag)
        if len(self.lower) != n - 1 or len(self.upper) != n - 1:
            raise ValueError("band lengths are inconsistent")

    @property
    def size(self) -> int:
        return len(self.diag)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """Product with a vector or with the columns of a 2-D array."""
        x = np.asarray(x, dtype=float)
        d = self.diag if x.ndim == 1 else self.diag[:, None]
        lo = self.lower if x.ndim == 1 else self.lower[:, None]
        up = self.upper if x.ndim == 1 else self.upper[:, None]
        y = d * x
        y[:-1] += up * x[1:]
        y[1:] += lo * x[:-1]
        return y

    def to_dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.upper, 1) + np.diag(self.lower, -1)

    def _factor(self):
        if self._lu is None:
            n = self.size
            lower, diag, upper = self.lower.tolist(), self.diag.tolist(), self.upper.tolist()
            pivots = [0.0] * n
            mult = [0.0] * max(n - 1, 0)
            pivots[0] = diag[0]
            for i in range(1, n):
                if pivots[i - 1] == 0.0:
                    raise SolverError(f"zero pivot at row {i - 1}")
                mult[i - 1] = lower[i - 1] / pivots[i - 1]
                pivots[i] = diag[i] - mult[i - 1] * upper[i - 1]
            if pivots[-1] == 0.0 or not np.all(np.isfinite(pivots)):
                raise SolverError("singular tridiagonal system")
            object.__setattr__(self, "_lu", (np.array(mult), np.array(pivots)))
        return self._lu

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve by banded LU without pivoting; ``rhs`` may hold several columns."""
        mult, pivots = self._factor()
        b = np.array(rhs, dtype=float)
        if b.shape[0] != self.size:
            raise ValueError("right-hand side has the wrong length")
        if b.ndim == 1:
            z = b.tolist()
            m, p, u = mult.tolist(), pivots.tolist(), self.upper.tolist()
            n = len(z)
            for i in range(1, n):
                z[i] -= m[i - 1] * z[i - 1]
            z[n - 1] /= p[n - 1]
            for i in range(n - 2, -1, -1):
                z[i] = (z[i] - u[i] * z[i + 1]) / p[i]
            return np.array(z)
        n = self.size
        for i in range(1, n):
            b[i] -= mult[i - 1] * b[i - 1]
        b[n - 1] /= pivots[n - 1]
        for i in range(n - 2, -1, -1):
            b[i] = (b[i] - self.upper[i] * b[i + 1]) / pivots[i]
        return b


@dataclass(frozen=True)
class GridFunction:
    """Nodal values of a P1 function at the interior nodes of ``mesh``."""

    mesh: UniformMesh1D
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != self.mesh.num_interior:
            raise MeshError("nodal vector does not match the mesh")

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        _check_same_mesh(self, other)
        return GridFunction(self.mesh, self.values - other.values)

    def __add__(self, other: "GridFunction") -> "GridFunction":
        _check_same_mesh(self, other)
        return GridFunction(self.mesh, self.values + other.values)

    def __mul__(self, c: float) -> "GridFunction":
        return GridFunction(self.mesh, c * self.values)

    __rmul__ = __mul__


def _check_same_mesh(u: GridFunction, v: GridFunction):
    if u.mesh != v.mesh:
        raise MeshError("grid functions live on different meshes")


def cell_integrals(problem, y, mesh: UniformMesh1D) -> np.ndarray:
    """Integral of the diffusion coefficient over every cell, for a batch of parameters.

    Returns an array of shape ``(len(y), num_cells)``.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    points, weights, ids = mesh._quadrature_cached(tuple(problem.breakpoints))
    vals = problem.coefficient(points[None, :], y)
    if not np.all(np.isfinite(vals)):
        raise AssemblyError(f"non-finite diffusion coefficient for {problem.name}")
    vals = np.broadcast_to(vals, (len(y), len(points))) * weights
    starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
    return np.add.reduceat(vals, starts, axis=1)


def assemble_bands(problem, y, mesh: UniformMesh1D) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched bands of ``A(y)``: arrays of shape ``(m, n-1)``, ``(m, n)``, ``(m, n-1)``.

    Entry ``(i, j)`` is ``a(phi_j, phi_i; y)``.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    w = cell_integrals(problem, y, mesh) / mesh.h**2
    diag = w[:, :-1] + w[:, 1:]
    off = -w[:, 1:-1]
    lower, upper = off.copy(), off.copy()
    vel = problem.velocity(y)
    if vel is not None:
        vel = np.asarray(vel, dtype=float)[:, None]
        upper = upper + 0.5 * vel
        lower = lower - 0.5 * vel
    return lower, diag, upper


def assemble_system(problem, y, mesh: UniformMesh1D) -> TridiagonalMatrix:
    lower, diag, upper = assemble_bands(problem, y, mesh)
    return TridiagonalMatrix(lower[0], diag[0], upper[0])


def assemble_load(mesh: UniformMesh1D) -> np.ndarray:
    """Load vector of ``f = 1``: ``int phi_i = h`` at every interior node."""
    return np.full(mesh.num_interior, mesh.h)


def solve_truth(problem, y, mesh: UniformMesh1D) -> GridFunction:
    A = assemble_system(problem, y, mesh)
    return GridFunction(mesh, A.solve(assemble_load(mesh)))


def v_inner(u: GridFunction, v: GridFunction) -> float:
    """``(u', v')_{L2}`` computed as ``u^T K v``."""
    _check_same_mesh(u, v)
    return float(u.values @ u.mesh.stiffness.matvec(v.values))


def v_norm(u: GridFunction) -> float:
    return float(np.sqrt(max(v_inner(u, u), 0.0)))


def riesz_dual_norm(residual, mesh: UniformMesh1D) -> np.ndarray | float:
    """Discrete dual norm ``sqrt(r^T K^{-1} r)``.

    A 2-D ``residual`` of shape ``(m, n)`` gives one norm per row.
    """
    r = np.asarray(residual, dtype=float)
    if r.shape[-1] != mesh.num_interior:
        raise MeshError("residual vector does not match the mesh")
    if r.ndim == 1:
        z = mesh.stiffness.solve(r)
        return float(np.sqrt(max(r @ z, 0.0)))
    z = mesh.stiffness.solve(r.T).T
    return np.sqrt(np.maximum(np.einsum("ij,ij->i", r, z), 0.0))
