"""One-dimensional L2-Wasserstein geometry through quantile functions.

In 1D the map ``mu -> F_mu^{-1}`` is an isometry from (P2, W2) onto a convex
cone of L2(0, 1), and barycenters correspond to weighted averages of quantile
functions. Everything below works on quantiles sampled at the midpoint nodes
``s_j = (j - 1/2) / S``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._parallel import chunked_map
from .hilbert_rb import GreedyConfig, GreedyResult, StagnationError

log = logging.getLogger(__name__)

DEFAULT_S = 2048


class MeasureError(ValueError):
    pass


@dataclass(frozen=True)
class UniformGrid:
    """``num_points`` equal cells tiling ``[x_lo, x_hi]``; values live at cell centers."""

    x_lo: float
    x_hi: float
    num_points: int

    def __post_init__(self):
        if not self.x_hi > self.x_lo or self.num_points < 2:
            raise MeasureError("grid needs x_hi > x_lo and at least two cells")

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / self.num_points

    @property
    def edges(self) -> np.ndarray:
        return self.x_lo + self.dx * np.arange(self.num_points + 1)

    @property
    def centers(self) -> np.ndarray:
        return self.x_lo + self.dx * (np.arange(self.num_points) + 0.5)


@dataclass(frozen=True)
class DiscreteMeasure:
    grid: UniformGrid
    density: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.density, dtype=float)
        if d.shape != (self.grid.num_points,):
            raise MeasureError("density does not match the grid")
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise MeasureError("density must be finite and nonnegative")
        total = d.sum() * self.grid.dx
        if abs(total - 1.0) > 1e-12 * max(1.0, self.grid.num_points / 1e3):
            raise MeasureError(f"density integrates to {total!r}, not 1")
        object.__setattr__(self, "density", d)

    @classmethod
    def from_unnormalized(cls, grid: UniformGrid, values) -> "DiscreteMeasure":
        v = np.maximum(np.asarray(values, dtype=float), 0.0)
        return cls(grid, v / (v.sum() * grid.dx))


def midpoint_nodes(S: int) -> np.ndarray:
    return (np.arange(S) + 0.5) / S


@dataclass(frozen=True)
class QuantileFunction:
    """Quantile values at the midpoint nodes of ``(0, 1)``."""

    values: np.ndarray

    @property
    def S(self) -> int:
        return len(self.values)

    @property
    def nodes(self) -> np.ndarray:
        return midpoint_nodes(self.S)

    @classmethod
    def from_atoms(cls, positions, weights=None, S: int = 840) -> "QuantileFunction":
        """Quantile of an atomic measure: the smallest atom whose cumulative weight reaches ``s``."""
        x = np.asarray(positions, dtype=float)
        w = np.full(len(x), 1.0 / len(x)) if weights is None else np.asarray(weights, dtype=float)
        order = np.argsort(x, kind="stable")
        x, w = x[order], w[order] / np.sum(w)
        cw = np.cumsum(w)
        idx = np.searchsorted(cw, midpoint_nodes(S), side="left")
        return cls(x[np.minimum(idx, len(x) - 1)])


def quantiles_of_densities(grid: UniformGrid, densities, S: int) -> np.ndarray:
    """Batched quantile transform: rows of ``densities`` -> rows of quantile values."""
    dens = np.atleast_2d(np.asarray(densities, dtype=float))
    masses = dens * grid.dx
    cdf = np.concatenate([np.zeros((len(dens), 1)), np.cumsum(masses, axis=1)], axis=1)
    cdf /= cdf[:, -1:]
    s = midpoint_nodes(S)
    edges = grid.edges
    out = np.empty((len(dens), S))
    for k in range(len(dens)):
        # cell j holds cdf[j] < s <= cdf[j + 1], so it carries positive mass
        j = np.clip(np.searchsorted(cdf[k], s, side="left") - 1, 0, grid.num_points - 1)
        mass = cdf[k, j + 1] - cdf[k, j]
        frac = np.divide(s - cdf[k, j], mass, out=np.zeros(S), where=mass > 0)
        out[k] = edges[j] + np.clip(frac, 0.0, 1.0) * grid.dx
    return out


def quantile_transform(measure: DiscreteMeasure, S: int = DEFAULT_S) -> QuantileFunction:
    """Inverse of the piecewise-linear CDF at the midpoint nodes."""
    if S < 16:
        raise MeasureError("need at least 16 quantile nodes")
    total = measure.density.sum() * measure.grid.dx
    if abs(total - 1.0) > 1e-9:
        raise MeasureError("measure is not normalized")
    return QuantileFunction(quantiles_of_densities(measure.grid, measure.density, S)[0])


def _as_quantile(m, S: int) -> QuantileFunction:
    if isinstance(m, QuantileFunction):
        return m
    return quantile_transform(m, S)


def w2_distance(mu, nu, S: int = DEFAULT_S) -> float:
    """W2 distance via the L2 norm of quantile differences (midpoint rule).

    Accepts :class:`DiscreteMeasure` or :class:`QuantileFunction` arguments.
    """
    if isinstance(mu, DiscreteMeasure) and isinstance(nu, DiscreteMeasure) and mu.grid != nu.grid:
        raise MeasureError("measures live on different grids")
    qa, qb = _as_quantile(mu, S), _as_quantile(nu, S)
    if qa.S != qb.S:
        raise MeasureError("quantile functions use different node counts")
    return float(np.sqrt(np.mean((qa.values - qb.values) ** 2)))


def density_from_quantile(grid: UniformGrid, q: np.ndarray) -> np.ndarray:
    """Recover a grid density from quantile values.

    The CDF is interpolated through ``(q_j, s_j)`` (plus half-spacing end
    points at levels 0 and 1), evaluated at the cell edges and differenced.
    Flat quantile stretches become a jump, i.e. mass in a single cell.
    """
    q = np.asarray(q, dtype=float)
    S = len(q)
    s = midpoint_nodes(S)
    lo = q[0] - 0.5 * (q[1] - q[0])
    hi = q[-1] + 0.5 * (q[-1] - q[-2])
    xp = np.concatenate([[lo], q, [hi]])
    fp = np.concatenate([[0.0], s, [1.0]])
    cdf = np.interp(grid.edges, xp, fp, left=0.0, right=1.0)
    mass = np.maximum(np.diff(cdf), 0.0)
    if mass.sum() <= 0:
        # all mass outside or on a single point: put it in the nearest cell
        mass = np.zeros(grid.num_points)
        mass[np.clip(int((q.mean() - grid.x_lo) / grid.dx), 0, grid.num_points - 1)] = 1.0
    return mass / (mass.sum() * grid.dx)


@dataclass(frozen=True)
class SimplexWeights:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or np.any(w < -1e-14) or abs(w.sum() - 1.0) > 1e-10:
            raise MeasureError(f"weights are not on the simplex: {w}")
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True)
class BarycentricSpace:
    """Barycenters of a fixed list of generators, stored by their quantiles."""

    quantiles: np.ndarray
    grid: UniformGrid | None = None
    labels: tuple = field(default=(), compare=False)

    @classmethod
    def from_measures(cls, measures: Sequence[DiscreteMeasure], S: int = DEFAULT_S, labels=()):
        grids = {m.grid for m in measures}
        if len(grids) != 1:
            raise MeasureError("generators must share one grid")
        (grid,) = grids
        q = quantiles_of_densities(grid, np.stack([m.density for m in measures]), S)
        return cls(q, grid, tuple(labels))

    @property
    def dim(self) -> int:
        return len(self.quantiles)

    @property
    def S(self) -> int:
        return self.quantiles.shape[1]


def barycenter(weights: SimplexWeights, space: BarycentricSpace) -> DiscreteMeasure:
    if not isinstance(weights, SimplexWeights):
        weights = SimplexWeights(weights)
    if len(weights) != space.dim:
        raise MeasureError("weight count differs from the number of generators")
    if space.grid is None:
        raise MeasureError("space has no grid to carry densities")
    q = weights.weights @ space.quantiles
    return DiscreteMeasure(space.grid, density_from_quantile(space.grid, q))


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto the probability simplex (sort based)."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    n = v.shape[1]
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ks = np.arange(1, n + 1)
    cond = u - css / ks > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(len(v)), rho] / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


@dataclass
class ProjectionResult:
    weights: np.ndarray
    distances: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray


def _face_minimizer(G: np.ndarray, b: np.ndarray, face: np.ndarray) -> np.ndarray | None:
    """Minimizer of ``l^T G l - 2 b^T l`` on the affine hull ``{sum l = 1, l_i = 0 off face}``."""
    k = len(face)
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = G[np.ix_(face, face)]
    kkt[:k, k] = kkt[k, :k] = 1.0
    rhs = np.concatenate([b[face], [1.0]])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)):
        return None
    z = np.zeros(len(b))
    z[face] = sol[:k]
    return z


def _active_set_one(G, b, tol, max_iter):
    """Primal active-set method; exact up to round-off when it converges."""
    n = len(b)
    i0 = int(np.argmin(np.diag(G) - 2 * b))
    x = np.zeros(n)
    x[i0] = 1.0
    face = [i0]
    scale = max(1.0, float(np.abs(np.diag(G)).max()))
    for it in range(max_iter):
        g = 2 * (G @ x - b)
        lam = float(np.mean(g[face]))
        w = g - lam
        w[face] = np.inf
        j = int(np.argmin(w))
        if w[j] >= -tol * scale:
            return x, True, it
        face.append(j)
        for _ in range(n + 1):
            z = _face_minimizer(G, b, np.array(face))
            if z is None:
                return x, False, it
            zf = z[face]
            if np.all(zf > 0):
                x = z
                break
            xf = x[face]
            neg = zf <= 0
            alpha = float(np.min(xf[neg] / (xf[neg] - zf[neg])))
            x = x + alpha * (z - x)
            x[x < 1e-15] = 0.0
            x = np.maximum(x, 0.0)
            x /= x.sum()
            face = [i for i in face if x[i] > 0]
        else:
            return x, False, it
    return x, False, max_iter


def _solve_one(G, b, c, L, tol, max_iter):
    n = len(b)

    def f(x):
        return x @ G @ x - 2 * b @ x + c

    x = np.zeros(n)
    x[int(np.argmin(np.diag(G) - 2 * b))] = 1.0
    fx = f(x)
    step = 1.0 / L
    x_prev = g_prev = None
    for it in range(max_iter):
        g = 2 * (G @ x - b)
        gmap = L * (x - project_simplex(x - g / L)[0])
        if np.linalg.norm(gmap) <= tol:
            return x, True, it
        if x_prev is not None:
            s, y = x - x_prev, g - g_prev
            sy = s @ y
            step = float(np.clip(s @ s / sy, 1e-3 / L, 1e6 / L)) if sy > 0 else 1.0 / L
        # projected gradient step, Armijo backtracking along the projection arc
        t = step
        for _ in range(60):
            xt = project_simplex(x - t * g)[0]
            ft = f(xt)
            if ft <= fx + 1e-4 * g @ (xt - x):
                break
            t *= 0.5
        else:
            return x, False, it
        # exact minimization over the face reached by the gradient step
        face = np.flatnonzero(xt > 0)
        z = _face_minimizer(G, b, face)
        if z is not None:
            d = z - xt
            neg = d < 0
            tau = min(1.0, float(np.min(-xt[neg] / d[neg]))) if neg.any() else 1.0
            xz = np.maximum(xt + tau * d, 0.0)
            xz /= xz.sum()
            fz = f(xz)
            if fz <= ft:
                xt, ft = xz, fz
        x_prev, g_prev = x, g
        if ft >= fx and np.array_equal(xt, x):
            return x, False, it
        x, fx = xt, ft
    return x, False, max_iter


def simplex_least_squares(
    gram: np.ndarray,
    rhs: np.ndarray,
    const: np.ndarray,
    *,
    tol: float = 1e-10,
    max_iter: int = 5000,
) -> ProjectionResult:
    """Minimize ``l^T G l - 2 b^T l + c`` over the simplex for every row ``b`` of ``rhs``.

    Each row first goes through a primal active-set method (KKT solves on
    the current face). Rows where it breaks down fall back to projected
    gradient with Barzilai-Borwein trial steps and Armijo backtracking,
    each step followed by an exact face minimization. That fallback stops
    once the gradient-mapping norm (step ``1/L``) is at most ``tol``, or
    after ``max_iter`` iterations with ``converged`` false.
    """
    G = np.asarray(gram, dtype=float)
    B = np.atleast_2d(np.asarray(rhs, dtype=float))
    c = np.broadcast_to(np.asarray(const, dtype=float), (len(B),))
    L = 2.0 * max(float(np.linalg.eigvalsh(G)[-1]), 1e-300)
    X = np.zeros_like(B)
    conv = np.zeros(len(B), dtype=bool)
    iters = np.zeros(len(B), dtype=int)
    for k in range(len(B)):
        X[k], conv[k], iters[k] = _active_set_one(G, B[k], tol, 10 * len(G) + 10)
        if not conv[k]:
            X[k], conv[k], iters[k] = _solve_one(G, B[k], c[k], L, tol, max_iter)
    F = np.einsum("ij,ij->i", X @ G, X) - 2 * np.einsum("ij,ij->i", B, X) + c
    return ProjectionResult(X, np.sqrt(np.maximum(F, 0.0)), conv, iters)


def _project_rows(gen_q: np.ndarray, targets: np.ndarray, **kw) -> ProjectionResult:
    S = gen_q.shape[1]
    gram = gen_q @ gen_q.T / S
    rhs = targets @ gen_q.T / S
    const = np.einsum("ij,ij->i", targets, targets) / S
    res = simplex_least_squares(gram, rhs, const, **kw)
    # exact distances from the reconstructed barycenter quantiles
    diff = targets - res.weights @ gen_q
    res.distances = np.sqrt(np.mean(diff**2, axis=1))
    # a vertex or the uniform weight never beats the returned point
    cand = [np.eye(len(gen_q))[i] for i in range(len(gen_q))] + [np.full(len(gen_q), 1.0 / len(gen_q))]
    for w in cand:
        d = np.sqrt(np.mean((targets - w @ gen_q) ** 2, axis=1))
        better = d < res.distances
        res.weights[better] = w
        res.distances[better] = d[better]
    return res


def project_to_barycentric(nu, space: BarycentricSpace, **kw) -> tuple[SimplexWeights, float, bool]:
    """Best barycentric approximation of ``nu``: ``(weights, W2 distance, converged)``."""
    q = _as_quantile(nu, space.S).values
    if space.dim == 1:
        return SimplexWeights(np.ones(1)), float(np.sqrt(np.mean((q - space.quantiles[0]) ** 2))), True
    res = _project_rows(space.quantiles, q[None, :], **kw)
    w = np.maximum(res.weights[0], 0.0)
    return SimplexWeights(w / w.sum()), float(res.distances[0]), bool(res.converged[0])


def projection_errors(gen_q: np.ndarray, targets: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Distances of many target quantiles to the barycentric space of ``gen_q``."""
    if len(gen_q) == 1:
        return np.sqrt(np.mean((targets - gen_q[0]) ** 2, axis=1))

    def work(block):
        return _project_rows(gen_q, block).distances

    return chunked_map(work, targets, chunk)


def farthest_pair(quantiles: np.ndarray) -> tuple[int, int, float]:
    """Exhaustive argmax of pairwise W2; lexicographically smallest ``(i, j)`` on ties."""
    Q = np.asarray(quantiles, dtype=float)
    N, S = Q.shape
    best = (-1.0, 0, 1)
    for i in range(N - 1):
        d2 = np.mean((Q[i + 1 :] - Q[i]) ** 2, axis=1)
        j = int(np.argmax(d2))
        if d2[j] > best[0]:
            best = (float(d2[j]), i, i + 1 + j)
    return best[1], best[2], float(np.sqrt(best[0]))


def barycentric_greedy(
    quantiles: np.ndarray,
    config: GreedyConfig,
    subset: Sequence[int] | None = None,
    start: Sequence[int] | None = None,
) -> GreedyResult:
    """Greedy selection of barycentric generators over rows of ``quantiles``.

    ``subset`` restricts the training elements (global row indices); with
    ``start`` the iteration resumes from those generators instead of the
    farthest pair.
    """
    Q = np.asarray(quantiles, dtype=float)
    idx = np.arange(len(Q)) if subset is None else np.asarray(subset, dtype=int)
    if start is None and len(idx) < 2 and config.n_max != 1:
        # a single element reproduces itself
        if len(idx) == 0:
            raise MeasureError("empty training set")
        return GreedyResult([int(idx[0])], [0.0], np.zeros(1), 0.0, True, new=[int(idx[0])])
    history: list[float] = []
    if start is None:
        i, j, d = farthest_pair(Q[idx])
        selected = [int(idx[i]), int(idx[j])]
        new = list(selected)
        if config.n_max is not None and config.n_max < 2:
            selected, new = selected[:1], new[:1]
    else:
        selected, new = [int(s) for s in start], []
    errors = projection_errors(Q[selected], Q[idx])
    history.append(float(errors.max()))
    stagnated = False
    while history[-1] > config.tol and (config.n_max is None or len(selected) < config.n_max):
        k = int(np.argmax(errors))
        cand = int(idx[k])
        if cand in selected:
            stagnated = True
            log.warning("barycentric greedy stagnated at n=%d", len(selected))
            break
        selected.append(cand)
        new.append(cand)
        errors = projection_errors(Q[selected], Q[idx])
        history.append(float(errors.max()))
        log.debug("n=%d max W2 error %.3e", len(selected), history[-1])
    e = history[-1]
    return GreedyResult(selected, history, errors, e, e <= config.tol, new=new, stagnated=stagnated)


def restarted_barycentric_greedy(
    quantiles: np.ndarray,
    start: Sequence[int],
    config: GreedyConfig,
    subset: Sequence[int] | None = None,
) -> GreedyResult:
    if not start:
        raise MeasureError("restart needs at least one generator")
    return barycentric_greedy(quantiles, config, subset=subset, start=start)


def measure_to_csv(measure: DiscreteMeasure, path) -> None:
    np.savetxt(
        path,
        np.column_stack([measure.grid.centers, measure.density]),
        delimiter=",",
        header="x,density",
        comments="",
        fmt="%.17g",
    )


def quantile_to_csv(q: QuantileFunction, path) -> None:
    np.savetxt(
        path, np.column_stack([q.nodes, q.values]), delimiter=",", header="s,q", comments="", fmt="%.17g"
    )
