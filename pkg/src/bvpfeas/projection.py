"""
Nearest-point projections onto implicit hypersurfaces.

A projection ``x = P(u)`` onto ``{phi = 0}`` is sought as a root of the
Lagrange system

    u - x + lam * grad phi(x) = 0,    phi(x) = 0,

either by Newton's method on ``(x, lam)`` or by steepest descent on the
merit function

    G(x, lam) = 0.5 * (||u - x + lam grad phi(x)||**2 + phi(x)**2).

Only the coordinates in ``surface.support`` move, so for the finite
difference surfaces every solve is at most 4-dimensional.

Any object with ``support``, ``dim`` and ``local_derivatives(x)`` returning
``(phi, grad_S, hess_SS)`` can be projected onto.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "ImplicitSurface",
    "ProjectionConfig",
    "ProjectionMethod",
    "ProjectionResult",
    "adaptive_tolerance",
    "merit_value",
    "project",
    "project_lagrange_newton",
    "project_merit_descent",
    "reflect",
]

TOL_FLOOR = 1e-14

# Armijo backtracking for the merit descent
ARMIJO_STEP = 1.0
ARMIJO_SHRINK = 0.5
ARMIJO_SLOPE = 1e-4
ARMIJO_MAX_BACKTRACKS = 40


class ProjectionMethod(str, enum.Enum):
    LAGRANGE_NEWTON = "lagrange_newton"
    MERIT_DESCENT = "merit_descent"


@dataclass(frozen=True)
class ProjectionConfig:
    method: ProjectionMethod = ProjectionMethod.LAGRANGE_NEWTON
    tol: float = 1e-10
    max_iter: int = 30
    adaptive_alpha: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "method", ProjectionMethod(self.method))
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.adaptive_alpha is not None and not 0 < self.adaptive_alpha < 1:
            raise ValueError("adaptive_alpha must lie in (0, 1)")


@dataclass(frozen=True)
class ProjectionResult:
    point: np.ndarray
    multiplier: float
    residual_phi: float
    stationarity: float
    iterations: int
    converged: bool
    stalled: bool = False
    merit_history: tuple[float, ...] = ()


class ImplicitSurface:
    """A hypersurface ``{x : phi(x) = 0}`` given by explicit callables.

    Used for toy geometry (lines, circles, ellipses); every coordinate is in
    the support.
    """

    def __init__(
        self,
        phi: Callable[[np.ndarray], float],
        grad: Callable[[np.ndarray], np.ndarray],
        hess: Callable[[np.ndarray], np.ndarray],
        dim: int,
    ):
        self.phi = phi
        self.grad = grad
        self.hess = hess
        self.dim = dim
        self.support = tuple(range(dim))

    @classmethod
    def hyperplane(cls, normal, offset: float = 0.0) -> "ImplicitSurface":
        """``{x : normal . x = offset}``."""
        nrm = np.asarray(normal, dtype=float)
        d = nrm.size
        return cls(
            lambda x: float(nrm @ x - offset),
            lambda x: nrm.copy(),
            lambda x: np.zeros((d, d)),
            d,
        )

    @classmethod
    def ellipsoid(cls, semi_axes, center=None) -> "ImplicitSurface":
        """``{x : sum(((x - c) / s)**2) = 1}``."""
        s = np.asarray(semi_axes, dtype=float)
        c = np.zeros_like(s) if center is None else np.asarray(center, dtype=float)
        w = 1.0 / s**2
        return cls(
            lambda x: float(np.sum(w * (x - c) ** 2) - 1.0),
            lambda x: 2 * w * (x - c),
            lambda x: np.diag(2 * w),
            s.size,
        )

    def residual(self, x) -> float:
        return self.phi(np.asarray(x, dtype=float))

    def gradient(self, x) -> np.ndarray:
        return np.asarray(self.grad(np.asarray(x, dtype=float)), dtype=float)

    def hessian(self, x) -> np.ndarray:
        return np.asarray(self.hess(np.asarray(x, dtype=float)), dtype=float)

    def local_derivatives(self, x):
        return self.residual(x), self.gradient(x), self.hessian(x)


def merit_value(u, x, lam: float, surface) -> float:
    """The merit ``G(x, lam)``; zero exactly at solutions of the Lagrange system."""
    u = np.asarray(u, dtype=float)
    x = np.asarray(x, dtype=float)
    phi = surface.residual(x)
    r = u - x + lam * surface.gradient(x)
    return 0.5 * (float(r @ r) + phi * phi)


def _certificate(uS, xS, lam, phi, g):
    r = uS - xS + lam * g
    return abs(phi), float(np.linalg.norm(r))


def _finish(u, x, S, lam, surface, iterations, tol, stalled=False, history=()):
    phi, g, _ = surface.local_derivatives(x)
    res, stat = _certificate(u[S], x[S], lam, phi, g)
    return ProjectionResult(
        point=x,
        multiplier=float(lam),
        residual_phi=res,
        stationarity=stat,
        iterations=iterations,
        converged=bool(res <= tol and stat <= tol),
        stalled=stalled,
        merit_history=tuple(history),
    )


def _newton_from(u, x, S, surface, tol, max_iter):
    """Run Lagrange-Newton from ``(x, 0)``; return (x, lam, iterations, singular)."""
    k = len(S)
    uS = u[S]
    lam = 0.0
    J = np.zeros((k + 1, k + 1))
    F = np.zeros(k + 1)
    for it in range(max_iter):
        phi, g, hess = surface.local_derivatives(x)
        F[:k] = uS - x[S] + lam * g
        F[k] = phi
        # at least one step unless u lies exactly on the surface
        if (it > 0 or phi == 0.0) and abs(phi) <= tol and np.linalg.norm(F[:k]) <= tol:
            return x, lam, it, False
        J[:k, :k] = lam * hess - np.eye(k)
        J[:k, k] = g
        J[k, :k] = g
        J[k, k] = 0.0
        try:
            d = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return x, lam, it, True
        if not np.all(np.isfinite(d)):
            return x, lam, it, True
        x = x.copy()
        x[S] += d[:k]
        lam += d[k]
        step = float(np.linalg.norm(d))
        if step <= max(tol, 4 * np.finfo(float).eps * (1.0 + np.abs(x[S]).max())):
            return x, lam, it + 1, False
    return x, lam, max_iter, False


def project_lagrange_newton(u, surface, cfg: ProjectionConfig, tol: float | None = None) -> ProjectionResult:
    """Project ``u`` by Newton's method on the Lagrange system.

    Starts from ``(u, 0)`` and always takes at least one step unless
    ``phi(u) == 0``, so a loose ``tol`` coarsens the projection without
    skipping it. Stops on the certificate (``|phi|`` and stationarity both
    within ``tol``) or a step shorter than ``tol``. A singular Jacobian triggers one restart from
    ``u`` nudged by ``1e-6`` along the unit gradient; if that also fails the
    current point is returned with ``converged=False``.
    """
    tol = cfg.tol if tol is None else tol
    u = np.asarray(u, dtype=float)
    S = list(surface.support)
    x, lam, its, singular = _newton_from(u, u.copy(), S, surface, tol, cfg.max_iter)
    if singular:
        _, g, _ = surface.local_derivatives(u)
        gn = np.linalg.norm(g)
        direction = g / gn if gn > 0 else np.ones_like(g) / math.sqrt(len(g))
        start = u.copy()
        start[S] += 1e-6 * direction
        x, lam, more, singular = _newton_from(u, start, S, surface, tol, cfg.max_iter)
        its += more
    return _finish(u, x, S, lam, surface, its, tol, stalled=singular)


def project_merit_descent(u, surface, cfg: ProjectionConfig, tol: float | None = None) -> ProjectionResult:
    """Project ``u`` by steepest descent on the merit function.

    The multiplier and the residual are measured in units of ``s =
    max(1, |grad phi(u)|)``, i.e. descent runs on

        0.5 * (||u - x + (mu/s) grad phi||**2 + (phi/s)**2),  lam = mu/s,

    which has the same zeros as ``G`` but a condition number independent of
    the mesh size. At least one step is taken unless ``phi(u) == 0``.
    Stops on the certificate, when successive merit values
    differ by less than ``0.5*(tol/s)**2``, on a failed line search, or at
    ``max_iter``.
    """
    tol = cfg.tol if tol is None else tol
    u = np.asarray(u, dtype=float)
    S = list(surface.support)
    uS = u[S]
    k = len(S)
    _, g0, _ = surface.local_derivatives(u)
    s = max(1.0, float(np.linalg.norm(g0)))
    change_tol = 0.5 * (tol / s) ** 2

    def evaluate(x, mu):
        phi, g, hess = surface.local_derivatives(x)
        r = uS - x[S] + (mu / s) * g
        value = 0.5 * (float(r @ r) + (phi / s) ** 2)
        return value, phi, g, hess, r

    x = u.copy()
    mu = 0.0
    value, phi, g, hess, r = evaluate(x, mu)
    history = [value]
    stalled = False
    its = 0
    for its in range(1, cfg.max_iter + 1):
        if (its > 1 or phi == 0.0) and abs(phi) <= tol and np.linalg.norm(r) <= tol:
            its -= 1
            break
        grad_x = (-r + (mu / s) * (hess @ r)) + (phi / s**2) * g
        grad_mu = float(g @ r) / s
        gnorm2 = float(grad_x @ grad_x) + grad_mu**2
        if gnorm2 == 0.0:
            stalled = True
            break
        t = ARMIJO_STEP
        accepted = False
        for _ in range(ARMIJO_MAX_BACKTRACKS):
            xt = x.copy()
            xt[S] -= t * grad_x
            mut = mu - t * grad_mu
            trial = evaluate(xt, mut)
            if trial[0] <= value - ARMIJO_SLOPE * t * gnorm2:
                accepted = True
                break
            t *= ARMIJO_SHRINK
        if not accepted:
            stalled = True
            break
        prev = value
        x, mu = xt, mut
        value, phi, g, hess, r = trial
        history.append(value)
        if prev - value < change_tol:
            break
    return _finish(u, x, S, mu / s, surface, its, tol, stalled=stalled, history=history)


def project(u, surface, cfg: ProjectionConfig, tol: float | None = None) -> ProjectionResult:
    if cfg.method is ProjectionMethod.LAGRANGE_NEWTON:
        return project_lagrange_newton(u, surface, cfg, tol)
    return project_merit_descent(u, surface, cfg, tol)


def reflect(u, surface, cfg: ProjectionConfig, tol: float | None = None) -> np.ndarray:
    """``2 P(u) - u`` with whatever point the projection returned, converged or not."""
    u = np.asarray(u, dtype=float)
    return 2 * project(u, surface, cfg, tol).point - u


def adaptive_tolerance(blocks, alpha: float, floor: float = TOL_FLOOR) -> float:
    """``alpha`` times the largest pairwise distance among ``blocks``, at least ``floor``."""
    pts = np.asarray(blocks, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[0] < 2:
        raise ValueError("need at least two blocks")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    diff = pts[:, None, :] - pts[None, :, :]
    diam = math.sqrt(float(np.max(np.sum(diff * diff, axis=-1))))
    return max(floor, alpha * diam)
