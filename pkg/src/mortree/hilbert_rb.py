"""Reduced bases in H1_0(0, 1) driven by the residual dual norm."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import fem1d
from ._parallel import chunked_map
from .fem1d import GridFunction, UniformMesh1D

log = logging.getLogger(__name__)

DUPLICATE_RTOL = 1e-10
ESTIMATOR_CHUNK = 64


class StagnationError(RuntimeError):
    """Every remaining candidate snapshot was already in the span."""


class ReducedSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class GreedyConfig:
    tol: float
    n_max: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("greedy tolerance must be positive")
        if self.n_max is not None and self.n_max < 1:
            raise ValueError("n_max must be positive")


@dataclass
class GreedyResult:
    """Outcome of a (restarted) greedy run.

    ``selected`` lists all generating training indices in order, ``new`` only
    the ones picked by this run; ``errors`` are the final per-element errors
    over the swept subset and ``history[i]`` is their maximum once
    ``len(selected) - len(history) + i + 1`` generators are in place.
    """

    selected: list[int]
    history: list[float]
    errors: np.ndarray
    error: float
    converged: bool
    new: list[int] = field(default_factory=list)
    stagnated: bool = False
    basis: "ReducedBasis | None" = None


@dataclass(frozen=True)
class ReducedBasis:
    """V-orthonormal basis; ``vectors`` has one row per basis function."""

    mesh: UniformMesh1D
    vectors: np.ndarray
    indices: tuple[int, ...] = ()
    params: tuple = ()

    @classmethod
    def empty(cls, mesh: UniformMesh1D) -> "ReducedBasis":
        return cls(mesh, np.zeros((0, mesh.num_interior)))

    @property
    def dim(self) -> int:
        return len(self.vectors)

    def function(self, coefficients) -> GridFunction:
        return GridFunction(self.mesh, np.asarray(coefficients) @ self.vectors)

    def gram(self) -> np.ndarray:
        K = self.mesh.stiffness
        return self.vectors @ K.matvec(self.vectors.T)


def orthonormalize_append(
    basis: ReducedBasis, snapshot: GridFunction, index: int = -1, param=None
) -> tuple[ReducedBasis, bool]:
    """Gram-Schmidt (two passes) in the V inner product.

    Returns ``(basis, accepted)``; a snapshot whose remainder is below
    ``DUPLICATE_RTOL`` times its norm is rejected and the basis is returned as is.
    """
    if snapshot.mesh != basis.mesh:
        raise fem1d.MeshError("snapshot and basis live on different meshes")
    K = basis.mesh.stiffness
    u = snapshot.values.astype(float).copy()
    norm0 = np.sqrt(max(u @ K.matvec(u), 0.0))
    if norm0 == 0.0:
        return basis, False
    for _ in range(2):
        if basis.dim:
            u -= (basis.vectors @ K.matvec(u)) @ basis.vectors
    norm = np.sqrt(max(u @ K.matvec(u), 0.0))
    if norm < DUPLICATE_RTOL * norm0:
        return basis, False
    vectors = np.vstack([basis.vectors, u / norm])
    return (
        ReducedBasis(basis.mesh, vectors, basis.indices + (int(index),), basis.params + (param,)),
        True,
    )


def _batched_errors(problem, mesh, vectors, params, load) -> np.ndarray:
    """Residual dual norms of the reduced Galerkin solutions for parameter rows."""
    params = np.atleast_2d(params)
    if len(vectors) == 0:
        return np.full(len(params), fem1d.riesz_dual_norm(load, mesh))
    lower, diag, upper = fem1d.assemble_bands(problem, params, mesh)
    AB = diag[:, None, :] * vectors[None]
    AB[:, :, :-1] += upper[:, None, :] * vectors[None, :, 1:]
    AB[:, :, 1:] += lower[:, None, :] * vectors[None, :, :-1]
    Ar = np.matmul(vectors[None], AB.transpose(0, 2, 1))
    fr = vectors @ load
    try:
        c = np.linalg.solve(Ar, np.broadcast_to(fr, (len(params), len(fr)))[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise ReducedSolveError("singular reduced system") from exc
    resid = load[None, :] - np.einsum("mj,mjn->mn", c, AB)
    return fem1d.riesz_dual_norm(resid, mesh)


class TruthModel:
    """Truth solver bound to a problem, mesh and training set, with a snapshot cache."""

    def __init__(self, problem, mesh: UniformMesh1D, training_points: np.ndarray):
        self.problem = problem
        self.mesh = mesh
        self.points = np.atleast_2d(np.asarray(training_points, dtype=float))
        self.load = fem1d.assemble_load(mesh)
        self._snapshots: dict[int, GridFunction] = {}
        self._bases: dict[tuple[int, ...], ReducedBasis] = {}

    def snapshot(self, i: int) -> GridFunction:
        i = int(i)
        if i not in self._snapshots:
            self._snapshots[i] = fem1d.solve_truth(self.problem, self.points[i], self.mesh)
        return self._snapshots[i]

    def basis_for(self, indices: Sequence[int]) -> ReducedBasis:
        """Orthonormal basis spanned by the given training snapshots, in order."""
        key = tuple(int(i) for i in indices)
        if key in self._bases:
            return self._bases[key]
        if key:
            basis = self.basis_for(key[:-1])
            basis, _ = orthonormalize_append(basis, self.snapshot(key[-1]), key[-1], tuple(self.points[key[-1]]))
        else:
            basis = ReducedBasis.empty(self.mesh)
        if len(self._bases) > 4096:
            self._bases.clear()
        self._bases[key] = basis
        return basis

    def errors(self, basis: ReducedBasis, params) -> np.ndarray:
        """Residual estimator for many parameter rows (swept in fixed chunks)."""
        params = np.atleast_2d(np.asarray(params, dtype=float))

        def work(block):
            return _batched_errors(self.problem, self.mesh, basis.vectors, block, self.load)

        return chunked_map(work, params, ESTIMATOR_CHUNK)

    def subset_errors(self, basis: ReducedBasis, subset: Sequence[int]) -> np.ndarray:
        return self.errors(basis, self.points[np.asarray(subset, dtype=int)])


def reduced_solve(basis: ReducedBasis, problem, y) -> np.ndarray:
    """Coefficients of the Galerkin projection onto ``span(basis)``."""
    if basis.dim == 0:
        raise ValueError("reduced solve needs a nonempty basis")
    A = fem1d.assemble_system(problem, y, basis.mesh)
    AB = A.matvec(basis.vectors.T)
    Ar = basis.vectors @ AB
    fr = basis.vectors @ fem1d.assemble_load(basis.mesh)
    try:
        return np.linalg.solve(Ar, fr)
    except np.linalg.LinAlgError as exc:
        raise ReducedSolveError("singular reduced system") from exc


def residual_estimator(basis: ReducedBasis, coefficients, problem, y) -> float:
    """Dual norm of ``F - a(u_n, .; y)`` with ``u_n = sum c_i b_i``."""
    mesh = basis.mesh
    load = fem1d.assemble_load(mesh)
    c = np.asarray(coefficients, dtype=float)
    if len(c) != basis.dim:
        raise ValueError("coefficient count differs from the basis dimension")
    if basis.dim == 0:
        return fem1d.riesz_dual_norm(load, mesh)
    A = fem1d.assemble_system(problem, y, mesh)
    resid = load - A.matvec(c @ basis.vectors)
    return fem1d.riesz_dual_norm(resid, mesh)


def best_fit_error(u: GridFunction, basis: ReducedBasis) -> float:
    """V-norm distance from ``u`` to ``span(basis)``."""
    if u.mesh != basis.mesh:
        raise fem1d.MeshError("function and basis live on different meshes")
    if basis.dim == 0:
        return fem1d.v_norm(u)
    K = basis.mesh.stiffness
    r = u.values - (basis.vectors @ K.matvec(u.values)) @ basis.vectors
    r = r - (basis.vectors @ K.matvec(r)) @ basis.vectors
    return float(np.sqrt(max(r @ K.matvec(r), 0.0)))


def greedy(
    model: TruthModel,
    config: GreedyConfig,
    subset: Sequence[int] | None = None,
    start: Sequence[int] | None = None,
) -> GreedyResult:
    """Residual-driven greedy over training indices ``subset``.

    Without ``start`` the first snapshot is drawn uniformly from ``subset``
    with ``config.seed``; otherwise iterations resume from the snapshots
    ``start``. Ties in the argmax go to the earliest subset position.
    """
    idx = np.arange(len(model.points)) if subset is None else np.asarray(subset, dtype=int)
    if len(idx) == 0:
        raise ValueError("greedy needs a nonempty training subset")
    n_max = config.n_max
    new: list[int] = []
    if start is None:
        rng = np.random.default_rng(config.seed)
        first = int(idx[rng.integers(len(idx))])
        basis = model.basis_for([first])
        if basis.dim == 0:
            raise StagnationError("first snapshot is zero")
        new.append(first)
    else:
        basis = model.basis_for(start)
        if n_max is not None and basis.dim > n_max:
            raise ValueError("start basis is larger than n_max")
    selected = list(basis.indices)
    errors = model.subset_errors(basis, idx)
    history = [float(errors.max())]
    while history[-1] > config.tol and (n_max is None or basis.dim < n_max):
        order = np.argsort(-errors, kind="stable")
        accepted = False
        for k in order:
            if errors[k] <= config.tol:
                break
            cand = int(idx[k])
            if cand in selected:
                continue
            trial = model.basis_for(selected + [cand])
            if trial.dim == basis.dim + 1:
                basis, accepted = trial, True
                break
            log.debug("snapshot %d rejected as duplicate", cand)
        if not accepted:
            raise StagnationError(
                f"all candidates above tol={config.tol:g} are already in the span (n={basis.dim})"
            )
        selected.append(cand)
        new.append(cand)
        errors = model.subset_errors(basis, idx)
        history.append(float(errors.max()))
        log.debug("n=%d max estimator %.3e (picked %d)", basis.dim, history[-1], cand)
    e = history[-1]
    return GreedyResult(selected, history, errors, e, e <= config.tol, new, False, basis)


def restarted_greedy(
    model: TruthModel,
    start: Sequence[int],
    config: GreedyConfig,
    subset: Sequence[int] | None = None,
) -> GreedyResult:
    """Resume greedy iterations from the space spanned by snapshots ``start``."""
    return greedy(model, config, subset=subset, start=list(start))
