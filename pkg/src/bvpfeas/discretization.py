"""
Finite-difference discretization of two-point boundary value problems.

A problem ``y'' = f(x, y, y')`` on ``[a, b]`` with ``y(a) = alpha`` and
``y(b) = beta`` is replaced by ``N`` centred-difference residuals

    phi_i(w) = (w[i+1] - 2 w[i] + w[i-1]) / h**2
               - f(x_i, w[i], (w[i+1] - w[i-1]) / (2 h)),   i = 1..N,

with ``w[0] = alpha`` and ``w[N+1] = beta`` held fixed. Each residual
defines a hypersurface in R^N that depends on at most three coordinates.

Indexing convention: surfaces are numbered ``1..N`` as in the math, while
vectors are plain 0-based numpy arrays, so ``w[i]`` in the formula above is
``omega[i - 1]`` in code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "BVProblem",
    "DiscreteSystem",
    "DomainEvaluationError",
    "Grid",
    "Hypersurface",
    "build_grid",
    "discretize",
    "residual_gradient",
    "rhs_partials",
    "rhs_second_partials",
]

Rhs = Callable[[float, float, float], float]

# relative steps for finite-difference fallbacks
FD_STEP = 1e-7
FD_STEP_SECOND = 1e-5


class DomainEvaluationError(ValueError):
    """The right-hand side (or one of its partials) returned a non-finite value."""


@dataclass(frozen=True, eq=False)
class BVProblem:
    """Continuous problem ``y'' = rhs(x, y, y')`` with Dirichlet data.

    ``rhs_dy`` / ``rhs_dyp`` are the analytic partials of ``rhs`` with
    respect to ``y`` and ``y'``; ``rhs_hess`` returns the three second
    partials ``(f_yy, f_yy', f_y'y')``. Missing derivatives are replaced by
    central differences.
    """

    rhs: Rhs
    interval: tuple[float, float]
    boundary: tuple[float, float]
    rhs_dy: Rhs | None = None
    rhs_dyp: Rhs | None = None
    rhs_hess: Callable[[float, float, float], tuple[float, float, float]] | None = None
    true_solutions: Mapping[str, Callable[[float], float]] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        a, b = self.interval
        if not (math.isfinite(a) and math.isfinite(b)):
            raise ValueError("interval endpoints must be finite")
        if not a < b:
            raise ValueError(f"need a < b, got interval {self.interval}")
        alpha, beta = self.boundary
        for label, sol in self.true_solutions.items():
            if abs(sol(a) - alpha) > 1e-9 or abs(sol(b) - beta) > 1e-9:
                raise ValueError(
                    f"true solution {label!r} of {self.name or 'problem'} "
                    "does not match the boundary data"
                )


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform grid with ``n_interior`` unknowns and ``h = (b - a)/(N + 1)``."""

    a: float
    b: float
    n_interior: int
    h: float
    nodes: np.ndarray

    @property
    def interior(self) -> np.ndarray:
        return self.nodes[1:-1]


def build_grid(a: float, b: float, n_interior: int) -> Grid:
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError("grid endpoints must be finite")
    if not a < b:
        raise ValueError(f"need a < b, got ({a}, {b})")
    if int(n_interior) != n_interior or n_interior < 3:
        raise ValueError(f"n_interior must be an integer >= 3, got {n_interior}")
    n = int(n_interior)
    h = (b - a) / (n + 1)
    nodes = a + np.arange(n + 2) * h
    nodes[-1] = b
    nodes.setflags(write=False)
    return Grid(a=float(a), b=float(b), n_interior=n, h=h, nodes=nodes)


def _check(value, what, x):
    if not math.isfinite(value):
        raise DomainEvaluationError(f"non-finite {what} at node x={x!r}")
    return value


def _call(func, what, x, *args):
    try:
        value = func(x, *args)
    except (ArithmeticError, ValueError) as exc:
        raise DomainEvaluationError(f"cannot evaluate {what} at node x={x!r}: {exc}") from exc
    return value


def rhs_partials(problem: BVProblem, x: float, y: float, yp: float) -> tuple[float, float]:
    """Return ``(f_y, f_y')``, analytic when available."""
    f = problem.rhs
    if problem.rhs_dy is not None:
        fy = _call(problem.rhs_dy, "f_y", x, y, yp)
    else:
        d = FD_STEP * max(1.0, abs(y))
        fy = (_call(f, "f", x, y + d, yp) - _call(f, "f", x, y - d, yp)) / (2 * d)
    if problem.rhs_dyp is not None:
        fyp = _call(problem.rhs_dyp, "f_y'", x, y, yp)
    else:
        d = FD_STEP * max(1.0, abs(yp))
        fyp = (_call(f, "f", x, y, yp + d) - _call(f, "f", x, y, yp - d)) / (2 * d)
    return _check(fy, "f_y", x), _check(fyp, "f_y'", x)


def rhs_second_partials(problem: BVProblem, x: float, y: float, yp: float):
    """Return ``(f_yy, f_yy', f_y'y')``; differences of first partials if not given."""
    if problem.rhs_hess is not None:
        out = _call(problem.rhs_hess, "second partials of f", x, y, yp)
    else:
        dy = FD_STEP_SECOND * max(1.0, abs(y))
        dp = FD_STEP_SECOND * max(1.0, abs(yp))
        fy_p, fyp_p = rhs_partials(problem, x, y + dy, yp)
        fy_m, fyp_m = rhs_partials(problem, x, y - dy, yp)
        fy_q, fyp_q = rhs_partials(problem, x, y, yp + dp)
        fy_r, fyp_r = rhs_partials(problem, x, y, yp - dp)
        f_yy = (fy_p - fy_m) / (2 * dy)
        f_ypyp = (fyp_q - fyp_r) / (2 * dp)
        f_yyp = 0.5 * ((fyp_p - fyp_m) / (2 * dy) + (fy_q - fy_r) / (2 * dp))
        out = (f_yy, f_yyp, f_ypyp)
    return tuple(_check(float(v), "second partial of f", x) for v in out)


class Hypersurface:
    """The set ``{omega : phi_i(omega) = 0}`` for one interior node.

    Parameters
    ----------
    problem : BVProblem
    grid : Grid
    index : int
        Surface number ``i`` in ``1..N``.

    Notes
    -----
    ``support`` lists the 0-based positions of ``omega`` the residual depends
    on. Gradients and Hessians are zero outside it.
    """

    def __init__(self, problem: BVProblem, grid: Grid, index: int):
        n = grid.n_interior
        if not 1 <= index <= n:
            raise ValueError(f"surface index must lie in 1..{n}, got {index}")
        self.problem = problem
        self.grid = grid
        self.index = index
        self.x = float(grid.nodes[index])
        self.dim = n
        self.alpha, self.beta = (float(v) for v in problem.boundary)
        # stencil positions (i-1, i, i+1) in 0-based omega, None where fixed
        self.stencil = tuple(p if 0 <= p < n else None for p in (index - 2, index - 1, index))
        self.support = tuple(p for p in self.stencil if p is not None)

    def __repr__(self):
        return f"Hypersurface(index={self.index}, x={self.x:g})"

    def stencil_values(self, omega) -> tuple[float, float, float]:
        lo, mid, hi = self.stencil
        wm = self.alpha if lo is None else float(omega[lo])
        w0 = float(omega[mid])
        wp = self.beta if hi is None else float(omega[hi])
        return wm, w0, wp

    def _args(self, omega):
        wm, w0, wp = self.stencil_values(omega)
        return wm, w0, wp, (wp - wm) / (2 * self.grid.h)

    def residual(self, omega) -> float:
        h = self.grid.h
        wm, w0, wp, slope = self._args(omega)
        fval = _check(_call(self.problem.rhs, "f", self.x, w0, slope), "f", self.x)
        return (wp - 2 * w0 + wm) / h**2 - fval

    def stencil_gradient(self, omega) -> np.ndarray:
        """Partials with respect to ``(w[i-1], w[i], w[i+1])``."""
        h = self.grid.h
        _, w0, _, slope = self._args(omega)
        fy, fyp = rhs_partials(self.problem, self.x, w0, slope)
        return np.array([1 / h**2 + fyp / (2 * h), -2 / h**2 - fy, 1 / h**2 - fyp / (2 * h)])

    def stencil_hessian(self, omega) -> np.ndarray:
        _, w0, _, slope = self._args(omega)
        f_yy, f_yyp, f_pp = rhs_second_partials(self.problem, self.x, w0, slope)
        c = 1 / (2 * self.grid.h)
        # phi depends on w through y = w[i] and y' = c (w[i+1] - w[i-1])
        return -np.array(
            [
                [f_pp * c * c, -f_yyp * c, -f_pp * c * c],
                [-f_yyp * c, f_yy, f_yyp * c],
                [-f_pp * c * c, f_yyp * c, f_pp * c * c],
            ]
        )

    def _keep(self):
        return [k for k, p in enumerate(self.stencil) if p is not None]

    def local_derivatives(self, omega):
        """Residual, support gradient and support Hessian in one call."""
        keep = self._keep()
        g = self.stencil_gradient(omega)[keep]
        hess = self.stencil_hessian(omega)[np.ix_(keep, keep)]
        return self.residual(omega), g, hess

    def gradient(self, omega) -> np.ndarray:
        out = np.zeros(self.dim)
        out[list(self.support)] = self.stencil_gradient(omega)[self._keep()]
        return out

    def hessian(self, omega) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        keep = self._keep()
        out[np.ix_(self.support, self.support)] = self.stencil_hessian(omega)[np.ix_(keep, keep)]
        return out


def residual_gradient(surface: Hypersurface, omega) -> dict[int, float]:
    """Gradient of ``phi_i`` as a sparse map ``{position: value}`` over the support."""
    g = surface.gradient(omega)
    return {p: float(g[p]) for p in surface.support}


@dataclass(frozen=True, eq=False)
class DiscreteSystem:
    problem: BVProblem
    grid: Grid
    surfaces: tuple[Hypersurface, ...]
    alpha: float
    beta: float

    @property
    def n(self) -> int:
        return self.grid.n_interior

    def residuals(self, omega) -> np.ndarray:
        return np.array([s.residual(omega) for s in self.surfaces])

    def jacobian_bands(self, omega):
        """Tridiagonal Jacobian of the residual map as ``(lower, diag, upper)``.

        ``lower[k]`` couples row ``k+1`` to column ``k``; ``upper[k]`` couples
        row ``k`` to column ``k+1``.
        """
        rows = np.array([s.stencil_gradient(omega) for s in self.surfaces])
        return rows[1:, 0].copy(), rows[:, 1].copy(), rows[:-1, 2].copy()

    def sample(self, func: Callable[[float], float]) -> np.ndarray:
        """Evaluate a function of x at the interior nodes."""
        return np.array([func(float(x)) for x in self.grid.interior])

    def affine(self) -> np.ndarray:
        n = self.n
        return self.alpha + np.arange(1, n + 1) * (self.beta - self.alpha) / (n + 1)


def discretize(problem: BVProblem, grid: Grid) -> DiscreteSystem:
    a, b = problem.interval
    if grid.a != a or grid.b != b:
        raise ValueError("grid was not built over the problem interval")
    surfaces = tuple(Hypersurface(problem, grid, i) for i in range(1, grid.n_interior + 1))
    alpha, beta = (float(v) for v in problem.boundary)
    return DiscreteSystem(problem=problem, grid=grid, surfaces=surfaces, alpha=alpha, beta=beta)
