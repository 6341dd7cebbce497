"""
Outer iterations: product-space Douglas-Rachford, averaged projections and
the Newton baseline.

The product-space state holds ``M`` copies (blocks) of the unknown vector.
With the ``full_n`` formulation there is one block per surface and the
agreement step is the plain block average. With ``three_set`` the surfaces
are split into the groups ``{i : i = r (mod 3)}``, whose members have
pairwise disjoint supports, so projecting onto a group intersection is a
set of independent single-surface projections. Its agreement step averages
each coordinate only over the blocks that can change it.

``dr_step`` and ``ap_step`` are the reference (pure Python) steps. ``run``
drives the compiled kernel in ``_kernels`` when the right-hand side can be
jitted and falls back to the reference steps otherwise.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import analysis
from .discretization import DiscreteSystem, DomainEvaluationError
from .projection import (
    ProjectionConfig,
    ProjectionMethod,
    adaptive_tolerance,
    project,
)

log = logging.getLogger(__name__)

__all__ = [
    "Engine",
    "Formulation",
    "NewtonResult",
    "ProductState",
    "SolveTrace",
    "SolverConfig",
    "StartSpec",
    "Status",
    "ap_step",
    "dr_step",
    "initial_state",
    "newton_solve",
    "run",
    "shadow",
    "start_vector",
    "thomas_solve",
]

NEWTON_STEP_TOL = 1e-12
CYCLE_CLOSE = 1e-12
CYCLE_APART = 1e-6
ZERO_PIVOT = 1e-300
STUCK_HORIZON = 500_000


class Engine(str, enum.Enum):
    DR = "dr"
    AP = "ap"
    NEWTON = "newton"


class Formulation(str, enum.Enum):
    FULL_N = "full_n"
    THREE_SET = "three_set"


class Status(str, enum.Enum):
    CONVERGED = "converged"
    STUCK = "stuck"
    DIVERGED = "diverged"
    CYCLING = "cycling"
    MAX_ITER = "max_iter"


@dataclass(frozen=True)
class StartSpec:
    """Starting function: the affine interpolant of the boundary data, or the
    constant ``lam`` at every interior node."""

    kind: str = "affine"
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in ("affine", "lambda_chi"):
            raise ValueError(f"unknown start kind {self.kind!r}")
        if not math.isfinite(self.lam):
            raise ValueError("lambda must be finite")

    @classmethod
    def parse(cls, text: str) -> "StartSpec":
        """Parse ``affine`` or ``lambda:REAL``."""
        if text == "affine":
            return cls()
        if text.startswith("lambda:"):
            return cls("lambda_chi", float(text.split(":", 1)[1]))
        raise ValueError(f"bad start spec {text!r}; use 'affine' or 'lambda:REAL'")

    def __str__(self):
        return "affine" if self.kind == "affine" else f"lambda:{self.lam:g}"


def start_vector(system: DiscreteSystem, start: StartSpec) -> np.ndarray:
    if start.kind == "affine":
        return system.affine()
    return np.full(system.n, float(start.lam))


@dataclass(frozen=True, eq=False)
class ProductState:
    formulation: Formulation
    blocks: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        object.__setattr__(self, "formulation", Formulation(self.formulation))
        if self.blocks.ndim != 2:
            raise ValueError("blocks must be a 2-D array (M, N)")
        if not np.all(np.isfinite(self.blocks)):
            raise ValueError("product state has non-finite entries")


@dataclass(frozen=True)
class SolverConfig:
    engine: Engine = Engine.DR
    formulation: Formulation = Formulation.THREE_SET
    projection: ProjectionConfig = field(
        default_factory=lambda: ProjectionConfig(tol=1e-10, max_iter=30, adaptive_alpha=0.5)
    )
    max_outer: int = 500_000
    stop_rel: float = 1e-10
    trace_stride: int = 1
    eps_tol: float = 1e-8
    residual_tol: float = 1e-8
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "engine", Engine(self.engine))
        object.__setattr__(self, "formulation", Formulation(self.formulation))
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")
        if self.stop_rel < 0:
            raise ValueError("stop_rel must be >= 0")
        if self.trace_stride < 1:
            raise ValueError("trace_stride must be >= 1")


@dataclass(eq=False)
class SolveTrace:
    """Diagnostics of one run.

    ``rel_err``, ``err_to_newton`` and ``err_to_true`` hold every iterate
    ``1..n_iterations``; ``shadows`` holds every ``stride``-th shadow point.
    ``err_to_newton`` is the error to the nearest reference solution (NaN
    when no reference was given).
    """

    engine: Engine
    formulation: Formulation
    status: Status
    rel_err: np.ndarray
    err_to_newton: np.ndarray
    err_to_true: np.ndarray
    shadows: np.ndarray
    final: np.ndarray
    stride: int = 1
    matched_reference: int | None = None
    inner_iterations: np.ndarray | None = None
    cycle: tuple[np.ndarray, np.ndarray] | None = None
    final_state: ProductState | None = None

    @property
    def n_iterations(self) -> int:
        return int(self.rel_err.size)

    @property
    def iterations(self) -> np.ndarray:
        return np.arange(1, self.n_iterations + 1)

    def first_iterate_below(self, eps: float) -> int | None:
        """First iterate whose error to the reference is below ``eps``."""
        hits = np.flatnonzero(self.err_to_newton < eps)
        return int(hits[0]) + 1 if hits.size else None

    def settled_below(self, eps: float) -> int | None:
        """First iterate from which the error to the reference stays below ``eps``."""
        e = self.err_to_newton
        if e.size == 0 or not e[-1] < eps:
            return None
        above = np.flatnonzero(~(e < eps))
        return int(above[-1]) + 2 if above.size else 1

    def rows(self):
        """Recorded rows ``(iteration, rel_err, err_to_newton, err_true_1, err_true_2)``."""
        for it in range(self.stride, self.n_iterations + 1, self.stride):
            k = it - 1
            trues = [self.err_to_true[k, j] if j < self.err_to_true.shape[1] else math.nan for j in range(2)]
            yield (it, self.rel_err[k], self.err_to_newton[k], *trues)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            write_trace_csv(self, fh)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def write_trace_csv(trace: SolveTrace, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["iteration", "rel_err", "err_to_newton", "err_to_true_1", "err_to_true_2"])
    for row in trace.rows():
        w.writerow([_fmt(v) for v in row])


# ---------------------------------------------------------------- layout


@dataclass(frozen=True, eq=False)
class _Layout:
    groups: tuple[tuple[int, ...], ...]  # surface positions handled by each block
    touch: np.ndarray  # (M, N) bool, coordinates averaged from each block
    counts: np.ndarray  # (N,) number of touching blocks per coordinate

    @property
    def group_of(self) -> np.ndarray:
        out = np.empty(sum(len(g) for g in self.groups), dtype=np.int64)
        for b, members in enumerate(self.groups):
            out[list(members)] = b
        return out


def _layout(surfaces: Sequence, formulation: Formulation, dim: int) -> _Layout:
    n_surf = len(surfaces)
    if formulation is Formulation.FULL_N:
        groups = tuple((k,) for k in range(n_surf))
        touch = np.ones((n_surf, dim), dtype=bool)
    else:
        if n_surf < 3:
            raise ValueError("the three-set formulation needs at least three surfaces")
        groups = tuple(tuple(range(r, n_surf, 3)) for r in range(3))
        touch = np.zeros((3, dim), dtype=bool)
        for b, members in enumerate(groups):
            for k in members:
                sup = list(surfaces[k].support)
                if touch[b, sup].any():
                    raise ValueError(f"surfaces in group {b} have overlapping supports")
                touch[b, sup] = True
    counts = touch.sum(axis=0).astype(float)
    if np.any(counts == 0):
        raise ValueError("some coordinate is touched by no block")
    return _Layout(groups, touch, counts)


def _surfaces_of(system_or_surfaces):
    if isinstance(system_or_surfaces, DiscreteSystem):
        return system_or_surfaces.surfaces
    return tuple(system_or_surfaces)


def _agree(values: np.ndarray, layout: _Layout) -> np.ndarray:
    # blocks summed in ascending order for run-to-run determinism
    acc = np.zeros(values.shape[1])
    for b in range(values.shape[0]):
        acc = acc + np.where(layout.touch[b], values[b], 0.0)
    return acc / layout.counts


def initial_state(system: DiscreteSystem, start: StartSpec, formulation: Formulation) -> ProductState:
    formulation = Formulation(formulation)
    w = start_vector(system, start)
    m = system.n if formulation is Formulation.FULL_N else 3
    return ProductState(formulation, np.tile(w, (m, 1)), 0)


def shadow(state: ProductState, system_or_surfaces=None) -> np.ndarray:
    """Agreement-set representative of a product state.

    ``full_n`` averages all blocks. ``three_set`` averages each coordinate
    over the touching blocks, which requires the surfaces. Without them the
    stencil layout of ``discretize`` is assumed.
    """
    X = state.blocks
    if state.formulation is Formulation.FULL_N:
        return _agree(X, _Layout((), np.ones_like(X, dtype=bool), np.full(X.shape[1], float(X.shape[0]))))
    if system_or_surfaces is None:
        layout = _stencil_layout(X.shape[1])
    else:
        layout = _layout(_surfaces_of(system_or_surfaces), Formulation.THREE_SET, X.shape[1])
    return _agree(X, layout)


def _stencil_layout(n: int) -> _Layout:
    class _S:
        def __init__(self, k):
            self.support = tuple(p for p in (k - 1, k, k + 1) if 0 <= p < n)

    return _layout([_S(k) for k in range(n)], Formulation.THREE_SET, n)


def _step_tolerance(X: np.ndarray, pcfg: ProjectionConfig) -> float:
    if pcfg.adaptive_alpha is not None and X.shape[0] >= 2:
        return adaptive_tolerance(X, pcfg.adaptive_alpha)
    return pcfg.tol


def _project_blocks(X, surfaces, layout, pcfg, tol, workers, reflect_: bool):
    """Apply P_A (or R_A) blockwise. Untouched coordinates are passed through."""

    def one(b):
        out = X[b].copy()
        for k in layout.groups[b]:
            s = surfaces[k]
            sup = list(s.support)
            p = project(X[b], s, pcfg, tol).point
            out[sup] = 2 * p[sup] - X[b, sup] if reflect_ else p[sup]
        return out

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, range(X.shape[0])))
    else:
        rows = [one(b) for b in range(X.shape[0])]
    return np.array(rows)


def dr_step(state: ProductState, system_or_surfaces, cfg: SolverConfig, workers: int | None = None) -> ProductState:
    """One Douglas-Rachford step ``x -> x/2 + R_B(R_A x)/2`` in the product space.

    Block ``k`` becomes ``mean(R) - R_k/2 + x_k/2`` where ``R = R_A(x)`` and
    the mean is the agreement map of the formulation.
    """
    surfaces = _surfaces_of(system_or_surfaces)
    X = state.blocks
    layout = _layout(surfaces, state.formulation, X.shape[1])
    if X.shape[0] != len(layout.groups):
        raise ValueError("state does not match the system dimensions")
    tol = _step_tolerance(X, cfg.projection)
    R = _project_blocks(X, surfaces, layout, cfg.projection, tol, workers or cfg.workers, True)
    Q = _agree(R, layout)
    new = Q[None, :] - 0.5 * R + 0.5 * X
    return ProductState(state.formulation, new, state.iteration + 1)


def ap_step(omega, system_or_surfaces, cfg: SolverConfig, workers: int | None = None) -> np.ndarray:
    """One averaged-projections step on the agreement set.

    Returns the average of the single-surface projections of ``omega``. A
    ``ProductState`` is accepted too, in which case its shadow is used.
    """
    surfaces = _surfaces_of(system_or_surfaces)
    if isinstance(omega, ProductState):
        omega = shadow(omega, surfaces)
    omega = np.asarray(omega, dtype=float)
    layout = _layout(surfaces, cfg.formulation, omega.size)
    X = np.tile(omega, (len(layout.groups), 1))
    P = _project_blocks(X, surfaces, layout, cfg.projection, cfg.projection.tol, workers or cfg.workers, False)
    return _agree(P, layout)


# ---------------------------------------------------------------- Newton


def thomas_solve(lower, diag, upper, rhs) -> np.ndarray:
    """Solve a tridiagonal system by elimination without pivoting.

    Raises ``np.linalg.LinAlgError`` on a pivot smaller than 1e-300.
    """
    n = len(diag)
    c = np.empty(n)
    d = np.empty(n)
    piv = diag[0]
    if abs(piv) < ZERO_PIVOT:
        raise np.linalg.LinAlgError("zero pivot in row 0")
    c[0] = upper[0] / piv if n > 1 else 0.0
    d[0] = rhs[0] / piv
    for i in range(1, n):
        piv = diag[i] - lower[i - 1] * c[i - 1]
        if abs(piv) < ZERO_PIVOT:
            raise np.linalg.LinAlgError(f"zero pivot in row {i}")
        c[i] = upper[i] / piv if i < n - 1 else 0.0
        d[i] = (rhs[i] - lower[i - 1] * d[i - 1]) / piv
    x = np.empty(n)
    x[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x


@dataclass(eq=False)
class NewtonResult:
    solution: np.ndarray
    status: Status
    iterations: int
    step_norms: list[float]
    iterates: list[np.ndarray]
    cycle: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED


def newton_solve(system: DiscreteSystem, start, max_iter: int = 50, tol: float = NEWTON_STEP_TOL) -> NewtonResult:
    """Newton's method on ``phi(omega) = 0`` with the tridiagonal Jacobian.

    Stops when the step norm drops below ``tol``. A 2-cycle (iterates two
    apart agree to 1e-12 while neighbours differ by more than 1e-6) ends the
    run with status ``cycling``. Non-finite values, singular Jacobians and
    failure to settle within ``max_iter`` steps all count as ``diverged``.
    """
    w = np.array(start, dtype=float)
    iterates = [w]
    steps: list[float] = []

    def done(status, cycle=None):
        return NewtonResult(iterates[-1], status, len(steps), steps, iterates, cycle)

    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_iter):
            try:
                F = system.residuals(w)
                lo, di, up = system.jacobian_bands(w)
                dw = thomas_solve(lo, di, up, -F)
            except (DomainEvaluationError, np.linalg.LinAlgError, OverflowError):
                return done(Status.DIVERGED)
            w = w + dw
            if not np.all(np.isfinite(w)) or np.abs(w).max() > 1e12:
                iterates.append(w)
                steps.append(float("inf"))
                return done(Status.DIVERGED)
            iterates.append(w)
            steps.append(float(np.linalg.norm(dw)))
            if steps[-1] < tol:
                return done(Status.CONVERGED)
            if len(iterates) >= 3:
                a, b, c = iterates[-3], iterates[-2], iterates[-1]
                if np.linalg.norm(c - a) < CYCLE_CLOSE and np.linalg.norm(b - a) > CYCLE_APART:
                    return done(Status.CYCLING, (b, c))
    return done(Status.DIVERGED)


# ---------------------------------------------------------------- driver


def _errors(values, refs, weight):
    if len(refs) == 0:
        return np.full(len(values), np.nan), None
    e = np.array([[weight * float(np.sum((v - r) ** 2)) for r in refs] for v in values])
    return e.min(axis=1), e.argmin(axis=1)


def _terminal_status(engine: Engine, rel_err: np.ndarray) -> Status:
    """Classify a run that used its whole budget."""
    if engine is Engine.DR:
        peaks = analysis.detect_peaks(rel_err) if rel_err.size >= 3 else analysis.PeakSeries.empty()
        if len(peaks) < 10:
            return Status.STUCK
        tail = max(10, int(0.2 * len(peaks)))
        verdict = analysis.classify_stagnation(peaks, window=tail)
    else:
        verdict = analysis.classify_series(rel_err)
    return Status.MAX_ITER if verdict == "decaying" else Status.STUCK


def _run_kernel(system, cfg, X, refs, truths, weight):
    from . import _kernels as K

    f, fy, fyp, fh = K.jit_rhs(system.problem)
    layout = _layout(system.surfaces, cfg.formulation, system.n)
    n = cfg.max_outer
    nref, ntrue = len(refs), len(truths)
    rel = np.zeros(n)
    eref = np.full((n, max(nref, 1)), np.nan)
    iref = np.full(n, -1, dtype=np.int64)
    etrue = np.full((n, max(ntrue, 1)), np.nan)
    shadows = np.zeros((n // cfg.trace_stride, system.n))
    inner = np.zeros(n, dtype=np.int64)
    pcfg = cfg.projection
    method = K.METHOD_NEWTON if pcfg.method is ProjectionMethod.LAGRANGE_NEWTON else K.METHOD_DESCENT
    sh_prev = _agree(X, layout)
    done, code = K.product_iterate(
        f, fy, fyp, fh,
        np.ascontiguousarray(system.grid.interior), system.grid.h, system.alpha, system.beta,
        X, layout.group_of, layout.touch, layout.counts,
        cfg.engine is Engine.DR, method, pcfg.tol,
        pcfg.adaptive_alpha if pcfg.adaptive_alpha is not None else -1.0, pcfg.max_iter,
        n, np.array(refs, dtype=float).reshape(nref, system.n),
        np.array(truths, dtype=float).reshape(ntrue, system.n), weight,
        cfg.eps_tol, cfg.stop_rel, cfg.residual_tol,
        sh_prev, cfg.trace_stride,
        rel, eref, iref, etrue, shadows, inner,
    )
    final = _agree(X, layout)
    return (
        done,
        {1: Status.CONVERGED, 2: Status.DIVERGED}.get(int(code)),
        rel[:done],
        eref[:done].min(axis=1) if nref else np.full(done, np.nan),
        int(iref[done - 1]) if nref and done else None,
        etrue[:done, :ntrue],
        shadows[: done // cfg.trace_stride],
        final,
        inner[:done],
        X,
    )


def _run_python(system, cfg, X, refs, truths, weight):
    state = ProductState(cfg.formulation, X.copy())
    surfaces = system.surfaces
    layout = _layout(surfaces, cfg.formulation, system.n)
    prev = _agree(state.blocks, layout)
    rel, shadows, status = [], [], None
    values = []
    for m in range(cfg.max_outer):
        if cfg.engine is Engine.DR:
            state = dr_step(state, surfaces, cfg)
            sh = _agree(state.blocks, layout)
        else:
            sh = ap_step(prev, surfaces, cfg)
        rel.append(float(np.linalg.norm(sh - prev)))
        prev = sh
        values.append(sh)
        if (m + 1) % cfg.trace_stride == 0:
            shadows.append(sh)
        if not np.all(np.isfinite(sh)) or np.abs(sh).max() > 1e12:
            status = Status.DIVERGED
            break
        if refs and min(weight * np.sum((sh - r) ** 2) for r in refs) < cfg.eps_tol:
            status = Status.CONVERGED
            break
        if rel[-1] < cfg.stop_rel and np.abs(system.residuals(sh)).max() <= cfg.residual_tol:
            status = Status.CONVERGED
            break
    eref, iref = _errors(values, refs, weight)
    etrue = np.array([[weight * float(np.sum((v - t) ** 2)) for t in truths] for v in values]).reshape(len(values), len(truths))
    done = len(values)
    return (
        done,
        status,
        np.array(rel),
        eref,
        int(iref[-1]) if iref is not None else None,
        etrue,
        np.array(shadows).reshape(len(shadows), system.n),
        values[-1],
        None,
        state.blocks if cfg.engine is Engine.DR else np.tile(values[-1], (len(layout.groups), 1)),
    )


def run(
    system: DiscreteSystem,
    cfg: SolverConfig,
    start: StartSpec | np.ndarray | ProductState = StartSpec(),
    references: Sequence[np.ndarray] = (),
    truths: Sequence[np.ndarray] | None = None,
    backend: str = "auto",
) -> SolveTrace:
    """Run one engine from a starting point and record its diagnostics.

    Parameters
    ----------
    references : sequence of arrays
        Discrete (Newton) solutions; ``err_to_newton`` is the error to the
        nearest one, and a DR/AP run counts as converged once that error is
        below ``cfg.eps_tol``.
    truths : sequence of arrays, optional
        True solutions sampled on the grid. Defaults to the problem's
        registered true solutions.
    start : StartSpec, array or ProductState
        A product state resumes a DR run (its blocks are used as is); the
        iteration count of the new trace restarts at 1.
    backend : {"auto", "kernel", "python"}
    """
    if truths is None:
        truths = [system.sample(s) for s in system.problem.true_solutions.values()]
    truths = list(truths)[:2]
    refs = [np.asarray(r, dtype=float) for r in references]
    weight = (system.grid.b - system.grid.a) / (system.n + 1)
    resume = start if isinstance(start, ProductState) else None
    if resume is not None:
        w0 = shadow(resume, system)
    elif isinstance(start, StartSpec):
        w0 = start_vector(system, start)
    else:
        w0 = np.asarray(start, dtype=float)

    if cfg.engine is Engine.NEWTON:
        res = newton_solve(system, w0, max_iter=min(cfg.max_outer, 100))
        values = res.iterates[1:] or [w0]
        eref, iref = _errors(values, refs, weight)
        etrue = np.array([[weight * float(np.sum((v - t) ** 2)) for t in truths] for v in values]).reshape(len(values), len(truths))
        stride = cfg.trace_stride
        return SolveTrace(
            engine=cfg.engine,
            formulation=cfg.formulation,
            status=res.status,
            rel_err=np.array(res.step_norms) if res.step_norms else np.zeros(1),
            err_to_newton=eref,
            err_to_true=etrue,
            shadows=np.array(values[stride - 1 :: stride]).reshape(-1, system.n),
            final=res.solution,
            stride=stride,
            matched_reference=int(iref[-1]) if iref is not None else None,
            cycle=res.cycle,
        )

    m = system.n if cfg.formulation is Formulation.FULL_N else 3
    if resume is not None and cfg.engine is Engine.DR:
        if resume.formulation is not cfg.formulation or resume.blocks.shape != (m, system.n):
            raise ValueError("resumed state does not match the configuration")
        X = np.array(resume.blocks, dtype=float, order="C")
    else:
        X = np.ascontiguousarray(np.tile(w0, (m, 1)))
    out = None
    if backend in ("auto", "kernel"):
        try:
            out = _run_kernel(system, cfg, X, refs, truths, weight)
        except Exception as exc:  # numba typing errors surface as many types
            if backend == "kernel":
                raise
            log.warning("compiled kernel unavailable (%s); using the reference loop", exc)
    if out is None:
        out = _run_python(system, cfg, X, refs, truths, weight)
    done, status, rel, eref, iref, etrue, shadows, final, inner, blocks = out
    if status is None:
        status = _terminal_status(cfg.engine, rel)
    return SolveTrace(
        engine=cfg.engine,
        formulation=cfg.formulation,
        status=status,
        rel_err=rel,
        err_to_newton=eref,
        err_to_true=etrue,
        shadows=shadows,
        final=final,
        stride=cfg.trace_stride,
        matched_reference=iref,
        inner_iterations=inner,
        final_state=ProductState(cfg.formulation, blocks, done) if np.all(np.isfinite(blocks)) else None,
    )


def with_engine(cfg: SolverConfig, engine: Engine | str) -> SolverConfig:
    return replace(cfg, engine=Engine(engine))
