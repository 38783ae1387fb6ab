"""Parametric test problems: three 1D elliptic PDEs and the KdV two-soliton family."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ALPHA_MIN = 4.0 / (4.0 * np.pi**2 - 1.0)
POINCARE_UNIT_INTERVAL = 1.0 / np.pi
KDV_K_SUM = 30.0
KDV_MASS = 4.0 * KDV_K_SUM
RNG_NAME = "numpy.random.PCG64"


class ConfigurationError(ValueError):
    pass


class WindowTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class ParameterBox:
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        if len(self.lower) != len(self.upper) or not self.lower:
            raise ConfigurationError("box bounds must be nonempty and of equal length")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ConfigurationError("box needs lower < upper in every dimension")

    @property
    def dim(self) -> int:
        return len(self.lower)

    def normalize(self, y) -> np.ndarray:
        """Map points into the unit cube."""
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        return (np.asarray(y, dtype=float) - lo) / (hi - lo)

    def contains(self, y, rtol: float = 1e-12) -> bool:
        t = self.normalize(y)
        return bool(np.all(t >= -rtol) and np.all(t <= 1 + rtol))


@dataclass(frozen=True)
class TrainingSet:
    points: np.ndarray
    provenance: dict = field(default_factory=dict, compare=False)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class TrainingSpec:
    """How to draw a training set: ``mode`` is ``"grid"`` or ``"random"``."""

    mode: str = "grid"
    counts: tuple[int, ...] = ()
    n: int = 0
    seed: int = 0


def make_training_set(box: ParameterBox, spec: TrainingSpec) -> TrainingSet:
    """Tensor grid (endpoints included, row-major) or seeded uniform samples."""
    if spec.mode == "grid":
        if len(spec.counts) != box.dim or any(c < 2 for c in spec.counts):
            raise ConfigurationError(f"grid needs {box.dim} counts >= 2, got {spec.counts}")
        axes = [np.linspace(lo, hi, c) for lo, hi, c in zip(box.lower, box.upper, spec.counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        points = np.stack([m.ravel() for m in mesh], axis=1)
        return TrainingSet(points, {"mode": "grid", "counts": list(spec.counts)})
    if spec.mode == "random":
        if spec.n < 2:
            raise ConfigurationError("random training set needs n >= 2")
        rng = np.random.Generator(np.random.PCG64(spec.seed))
        lo, hi = np.asarray(box.lower), np.asarray(box.upper)
        points = lo + (hi - lo) * rng.random((spec.n, box.dim))
        return TrainingSet(points, {"mode": "random", "n": spec.n, "seed": spec.seed, "rng": RNG_NAME})
    raise ConfigurationError(f"unknown training mode {spec.mode!r}")


# --- elliptic problems -------------------------------------------------------


def diff1_coefficient(x, y, alpha: float):
    """Smooth two-mode diffusion coefficient; broadcasts ``x`` against ``y[..., :2]``."""
    if alpha <= ALPHA_MIN:
        raise ConfigurationError(f"alpha must exceed {ALPHA_MIN:.6f} for coercivity, got {alpha}")
    y = np.asarray(y, dtype=float)
    y1, y2 = y[..., 0:1], y[..., 1:2]
    return (
        1.0
        + np.cos(2 * np.pi * x) * y1 / (alpha * np.pi**2)
        + np.cos(4 * np.pi * x) * y2 / (4 * np.pi**2)
    )


def diff1_constants(alpha: float) -> tuple[float, float]:
    # both cosines peak at x = 0, so the extreme coefficient values are attained there
    spread = 1.0 / (alpha * np.pi**2) + 1.0 / (4 * np.pi**2)
    return 1.0 - spread, 1.0 + spread


def _in_intervals(z, intervals):
    z = np.asarray(z, dtype=float)
    out = np.zeros(z.shape, dtype=bool)
    for lo, hi, lo_closed, hi_closed in intervals:
        above = z >= lo if lo_closed else z > lo
        below = z <= hi if hi_closed else z < hi
        out |= above & below
    return out


# A1 = [0, 0.2) U (0.4, 0.6) U (0.8, 1], B1 = (-0.2, 0.4), B2 = (-0.7, -0.2) U (0.4, 1]
_A1 = [(0.0, 0.2, True, False), (0.4, 0.6, False, False), (0.8, 1.0, False, True)]
_B1 = [(-0.2, 0.4, False, False)]
_B2 = [(-0.7, -0.2, False, False), (0.4, 1.0, False, True)]
DIFF2_BREAKPOINTS = (0.2, 0.4, 0.6, 0.8)


def diff2_g1(y1):
    return ((1.4 * np.asarray(y1, dtype=float)) ** 2 - 0.8) ** 2 - 1.0


def diff2_g2(y2):
    return _in_intervals(y2, _B1).astype(float) - _in_intervals(y2, _B2).astype(float)


def diff2_coefficient(x, y):
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    a1 = 0.49 * np.cos(8 * np.pi * x)
    a2 = 0.49 * _in_intervals(x, _A1)
    return 1.0 + a1 * diff2_g1(y[..., 0:1]) + a2 * diff2_g2(y[..., 1:2])


DIFF2_CONSTANTS = (1.0 - 0.49 - 0.49, 1.0 + 0.49 + 0.49)


def cvdiff_constants(y_max: float) -> tuple[float, float]:
    """Coercivity/continuity constants of ``-u'' + y u'`` on H1_0(0, 1)."""
    if y_max < 0:
        raise ConfigurationError("y_max must be nonnegative")
    return 1.0, 1.0 + POINCARE_UNIT_INTERVAL * y_max


@dataclass(frozen=True)
class ParametricProblem:
    """A parametric problem ``a(u, v; y) = F(v)`` with ``F(v) = int v``.

    ``coefficient(x, y)`` maps quadrature points of shape ``(1, Q)`` and
    parameters of shape ``(m, p)`` to diffusion values ``(m, Q)``;
    ``velocity(y)`` returns the convection speed per parameter or ``None``.
    """

    name: str
    box: ParameterBox
    coefficient: Callable
    velocity: Callable = field(default=lambda y: None)
    breakpoints: tuple[float, ...] = ()
    r: float | None = None
    R: float | None = None
    options: dict = field(default_factory=dict, compare=False)

    kind = "hilbert"

    @property
    def condition_number(self) -> float | None:
        if self.r is None or self.R is None:
            return None
        return self.R / self.r


def diff1_problem(alpha: float = 1.0) -> ParametricProblem:
    if alpha <= ALPHA_MIN:
        raise ConfigurationError(f"alpha must exceed {ALPHA_MIN:.6f} for coercivity, got {alpha}")
    r, R = diff1_constants(alpha)
    return ParametricProblem(
        name="diff1",
        box=ParameterBox((-1.0, -1.0), (1.0, 1.0)),
        coefficient=lambda x, y: diff1_coefficient(x, y, alpha),
        r=r,
        R=R,
        options={"alpha": alpha},
    )


def diff2_problem() -> ParametricProblem:
    return ParametricProblem(
        name="diff2",
        box=ParameterBox((-1.0, -1.0), (1.0, 1.0)),
        coefficient=diff2_coefficient,
        breakpoints=DIFF2_BREAKPOINTS,
        r=DIFF2_CONSTANTS[0],
        R=DIFF2_CONSTANTS[1],
    )


def cvdiff_problem(y_max: float = 10000.0) -> ParametricProblem:
    r, R = cvdiff_constants(y_max)
    return ParametricProblem(
        name="cvdiff",
        box=ParameterBox((0.0,), (float(y_max),)),
        coefficient=lambda x, y: np.ones((np.atleast_2d(y).shape[0], np.shape(x)[-1])),
        velocity=lambda y: np.atleast_2d(np.asarray(y, dtype=float))[:, 0],
        r=r,
        R=R,
        options={"y_max": float(y_max)},
    )


def cvdiff_exact(x, y: float):
    """Closed-form solution of ``-u'' + y u' = 1`` with zero boundary values."""
    x = np.asarray(x, dtype=float)
    if y == 0:
        return 0.5 * x * (1 - x)
    # (e^{yx} - 1) / (e^y - 1) written to stay finite for large y
    ratio = np.exp(y * (x - 1.0)) * -np.expm1(-y * x) / -np.expm1(-y)
    return (x - ratio) / y


# --- KdV two-soliton family --------------------------------------------------

KDV_BOX = ParameterBox((0.0, 0.9, 0.2, 16.0), (2.5e-3, 1.1, 0.4, 22.0))


@dataclass(frozen=True)
class KdVParameters:
    t: float
    c1: float
    c2: float
    k2: float

    @property
    def k1(self) -> float:
        return KDV_K_SUM - self.k2

    @property
    def mass(self) -> float:
        return 4.0 * (self.k1 + self.k2)

    def as_array(self) -> np.ndarray:
        return np.array([self.t, self.c1, self.c2, self.k2])

    @classmethod
    def from_array(cls, y) -> "KdVParameters":
        t, c1, c2, k2 = (float(v) for v in y)
        return cls(t, c1, c2, k2)


def _kdv_terms(params: np.ndarray):
    """Exponential-sum form of ``det(I + A)``: rates and log-prefactors per term."""
    t, c1, c2, k2 = (params[:, i : i + 1] for i in range(4))
    k1 = KDV_K_SUM - k2
    with np.errstate(divide="ignore"):
        logA1 = np.log(c1**2 / (2 * k1))
        logA2 = np.log(c2**2 / (2 * k2))
        logA12 = logA1 + logA2 + 2 * np.log(np.abs(k1 - k2)) - 2 * np.log(k1 + k2)
    zero = np.zeros_like(t)
    rates = np.concatenate([zero, 2 * k1, 2 * k2, 2 * (k1 + k2)], axis=1)
    offsets = np.concatenate(
        [zero, logA1 - 2 * k1**3 * t, logA2 - 2 * k2**3 * t, logA12 - 2 * (k1**3 + k2**3) * t],
        axis=1,
    )
    return rates, offsets


def kdv_solution_batch(x, params) -> np.ndarray:
    """Two-soliton profile for each parameter row; returns ``(m, len(x))``.

    With ``F = sum_j T_j``, ``T_j = exp(rate_j x + offset_j)`` and
    ``p_j = T_j / F``, the profile ``2 d^2/dx^2 log F`` equals
    ``sum_{i<j} 2 p_i p_j (rate_i - rate_j)^2``; the softmax weights keep
    this free of overflow and manifestly nonnegative.
    """
    params = np.atleast_2d(np.asarray(params, dtype=float))
    x = np.asarray(x, dtype=float)
    rates, offsets = _kdv_terms(params)
    logT = rates[:, :, None] * x[None, None, :] + offsets[:, :, None]
    shift = np.max(logT, axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        T = np.exp(logT - shift)
    T = np.nan_to_num(T, nan=0.0)
    p = T / T.sum(axis=1, keepdims=True)
    u = np.zeros((params.shape[0], x.size))
    for i in range(4):
        for j in range(i + 1, 4):
            u += 2.0 * p[:, i] * p[:, j] * (rates[:, i, None] - rates[:, j, None]) ** 2
    return u


def kdv_solution(x, params: KdVParameters) -> np.ndarray:
    return kdv_solution_batch(x, params.as_array()[None, :])[0]


def one_soliton(x, k: float, c: float, t: float) -> np.ndarray:
    """Single soliton with the same phase convention as :func:`kdv_solution`."""
    phase = k * np.asarray(x, dtype=float) - k**3 * t + 0.5 * np.log(c**2 / (2 * k))
    return 2 * k**2 / np.cosh(phase) ** 2


@dataclass(frozen=True)
class KdVProblem:
    """KdV snapshots viewed as probability densities on a finite window."""

    x_lo: float = -2.0
    x_hi: float = 4.0
    num_points: int = 4096
    box: ParameterBox = KDV_BOX
    name: str = "kdv"

    kind = "wasserstein"

    def grid(self):
        from .wasserstein1d import UniformGrid

        return UniformGrid(self.x_lo, self.x_hi, self.num_points)

    def densities(self, params) -> np.ndarray:
        """Normalized densities for a batch of parameter rows, shape ``(m, M)``."""
        g = self.grid()
        u = kdv_solution_batch(g.centers, params)
        mass = u.sum(axis=1) * g.dx / KDV_MASS
        if np.any(mass < 0.999):
            bad = int(np.argmin(mass))
            raise WindowTooSmallError(
                f"window [{self.x_lo}, {self.x_hi}] holds only {mass[bad]:.6f} of the mass"
            )
        return u / (u.sum(axis=1, keepdims=True) * g.dx)


def kdv_density(params: KdVParameters, grid) -> "DiscreteMeasure":
    from .wasserstein1d import DiscreteMeasure

    problem = KdVProblem(grid.x_lo, grid.x_hi, grid.num_points)
    return DiscreteMeasure(grid, problem.densities(params.as_array()[None, :])[0])


def get_problem(name: str, **options):
    """Problem factory used by the experiment driver."""
    if name == "diff1":
        return diff1_problem(float(options.get("alpha", 1.0)))
    if name == "diff2":
        return diff2_problem()
    if name == "cvdiff":
        return cvdiff_problem(float(options.get("y_max", 10000.0)))
    if name == "kdv":
        return KdVProblem(
            float(options.get("x_lo", -2.0)),
            float(options.get("x_hi", 4.0)),
            int(options.get("num_points", 4096)),
        )
    raise ConfigurationError(f"unknown problem {name!r}")


def training_for(problem, spec: TrainingSpec | None = None) -> TrainingSet:
    if spec is None:
        if problem.name == "kdv":
            spec = TrainingSpec("random", n=2000, seed=0)
        elif problem.name == "cvdiff":
            spec = TrainingSpec("grid", counts=(10001,))
        else:
            spec = TrainingSpec("grid", counts=(200, 200))
    return make_training_set(problem.box, spec)


__all__: Sequence[str] = [
    "ALPHA_MIN",
    "ConfigurationError",
    "KdVParameters",
    "KdVProblem",
    "ParameterBox",
    "ParametricProblem",
    "TrainingSet",
    "TrainingSpec",
    "WindowTooSmallError",
    "cvdiff_constants",
    "cvdiff_exact",
    "cvdiff_problem",
    "diff1_coefficient",
    "diff1_problem",
    "diff2_coefficient",
    "diff2_problem",
    "get_problem",
    "kdv_density",
    "kdv_solution",
    "kdv_solution_batch",
    "make_training_set",
    "one_soliton",
    "training_for",
]
