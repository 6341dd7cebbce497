"""
Example problems, the error metric and the table/demo drivers.

The right-hand sides are plain scalar functions using ``math`` so the same
code runs in the reference path and inside the compiled kernels.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from multiprocessing import get_context
from typing import Callable, Mapping, Sequence

import numpy as np

from . import analysis
from .discretization import BVProblem, DiscreteSystem, build_grid, discretize
from .projection import ImplicitSurface, ProjectionConfig, project_lagrange_newton
from .solvers import (
    Engine,
    Formulation,
    SolverConfig,
    SolveTrace,
    StartSpec,
    Status,
    newton_solve,
    run,
    start_vector,
)

__all__ = [
    "BasinTable",
    "DemoTrace",
    "ExampleProblem",
    "StartSpec",
    "SummaryRow",
    "basin_experiment",
    "ellipse_line_demo",
    "error_metric",
    "get_example",
    "newton_references",
    "register_examples",
    "summary_experiment",
]

SELF_CHECK_STEP = 1e-3
SELF_CHECK_POINTS = 50
SELF_CHECK_TOL = 1e-6
MATCH_EPS = 1e-2
BASIN_FIRST_CAP = 150_000
BASIN_FINAL_CAP = 500_000


def error_metric(candidate, reference, interval, n: int) -> float:
    """``(b - a)/(N + 1) * sum((candidate - reference)**2)``."""
    c = np.asarray(candidate, dtype=float)
    r = np.asarray(reference, dtype=float)
    if c.shape != r.shape:
        raise ValueError(f"length mismatch: {c.shape} vs {r.shape}")
    if c.ndim != 1 or c.size != n:
        raise ValueError(f"expected vectors of length N={n}")
    a, b = interval
    d = c - r
    return (b - a) / (n + 1) * float(d @ d)


# ------------------------------------------------------------ right-hand sides


def _book(x, y, yp):
    return (32.0 + 2.0 * x**3 - y * yp) / 8.0


def _book_dy(x, y, yp):
    return -yp / 8.0


def _book_dyp(x, y, yp):
    return -y / 8.0


def _book_hess(x, y, yp):
    return 0.0, -0.125, 0.0


def _neg_abs(x, y, yp):
    return -abs(y)


def _neg_abs_dy(x, y, yp):
    # sign(0) = 0
    if y > 0:
        return -1.0
    if y < 0:
        return 1.0
    return 0.0


def _zero(x, y, yp):
    return 0.0


def _zero_hess(x, y, yp):
    return 0.0, 0.0, 0.0


def _jump(x, y, yp):
    return 0.0 if x < 0 else y


def _jump_dy(x, y, yp):
    return 0.0 if x < 0 else 1.0


def _neg_exp(x, y, yp):
    return -math.exp(y)


def _neg_exp_hess(x, y, yp):
    return -math.exp(y), 0.0, 0.0


def _heaviside(x, y, yp):
    return -1.0 if y < 0 else 1.0


# ------------------------------------------------------------ true solutions


def _ex2_constants():
    c4 = 0.6453425944
    t = math.tan(0.5 * math.log(c4 / (math.e + c4)))
    t1, s1, k1 = math.tan(1.0), math.sin(1.0), math.cos(1.0)
    c2 = -(t1 + t) / (t1 * t * s1 - k1 * t1 - k1 * t - s1)
    c1 = (c2 * k1 - 1.0) / s1
    c3 = -(c4 / math.e + 1.0) / math.e
    # the two branches meet where y = 0
    x0 = 1.0 + 0.5 * math.log(c4 / (math.e + c4))
    return {"c1": c1, "c2": c2, "c3": c3, "c4": c4, "x0": x0}


def _ex5_constant(seed: float) -> float:
    """Root of ``c * sech(sqrt(c/2)/2)**2 = 1`` bracketing ``seed``."""
    g = lambda c: math.log(c) - 2.0 * math.log(math.cosh(math.sqrt(c / 2.0) / 2.0))
    lo, hi = seed * 0.95, seed * 1.05
    if g(lo) * g(hi) > 0:
        raise ValueError(f"no root bracketed near {seed}")
    while hi - lo > 1e-12 * hi:
        mid = 0.5 * (lo + hi)
        if g(lo) * g(mid) <= 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def _ex5_solution(c: float) -> Callable[[float], float]:
    k = math.sqrt(2.0) / 2.0 * math.sqrt(c)
    return lambda x: math.log(c - c * math.tanh(k * (0.5 - x)) ** 2)


@dataclass(frozen=True, eq=False)
class ExampleProblem:
    number: int
    name: str
    problem: BVProblem
    constants: Mapping[str, float] = field(default_factory=dict)
    kinks: tuple[float, ...] = ()
    default_ns: tuple[int, ...] = (11, 21)

    @property
    def solution_names(self) -> tuple[str, ...]:
        return tuple(self.problem.true_solutions)

    def system(self, n: int) -> DiscreteSystem:
        a, b = self.problem.interval
        return discretize(self.problem, build_grid(a, b, n))

    def sampled_solutions(self, system: DiscreteSystem) -> list[np.ndarray]:
        return [system.sample(s) for s in self.problem.true_solutions.values()]


def _self_check(ex: ExampleProblem) -> None:
    """Check every true solution against its ODE by 5-point differences."""
    a, b = ex.problem.interval
    d = SELF_CHECK_STEP
    xs = a + (b - a) * (np.arange(SELF_CHECK_POINTS) + 0.5) / SELF_CHECK_POINTS
    for label, y in ex.problem.true_solutions.items():
        for x in xs:
            x = float(x)
            for k in ex.kinks:
                if abs(x - k) < 3 * d:
                    x = k + math.copysign(3 * d, x - k if x != k else 1.0)
            v = [y(x + j * d) for j in (-2, -1, 0, 1, 2)]
            yp = (v[0] - 8 * v[1] + 8 * v[3] - v[4]) / (12 * d)
            ypp = (-v[0] + 16 * v[1] - 30 * v[2] + 16 * v[3] - v[4]) / (12 * d * d)
            res = ypp - ex.problem.rhs(x, v[2], yp)
            if not abs(res) < SELF_CHECK_TOL:
                raise ValueError(
                    f"example {ex.number} ({ex.name}): solution {label!r} fails its ODE "
                    f"at x={x:.6g} (residual {res:.3g})"
                )


def _build_examples() -> list[ExampleProblem]:
    out = []

    out.append(ExampleProblem(
        1, "book",
        BVProblem(_book, (1.0, 3.0), (17.0, 43.0 / 3.0), _book_dy, _book_dyp, _book_hess,
                  {"y": lambda x: x * x + 16.0 / x}, "book"),
    ))

    k2 = _ex2_constants()
    c1, c2, c3, c4, x0 = (k2[n] for n in ("c1", "c2", "c3", "c4", "x0"))
    out.append(ExampleProblem(
        2, "abs-bvp",
        BVProblem(_neg_abs, (-1.0, 1.0), (1.0, -1.0), _neg_abs_dy, _zero, _zero_hess,
                  {"y": lambda x: c1 * math.sin(x) + c2 * math.cos(x) if x <= x0
                   else c3 * math.exp(x) + c4 * math.exp(-x)}, "abs-bvp"),
        k2, (x0,),
    ))

    e = math.e
    m = (1.0 / e + 2.0) / (2.0 * e)
    out.append(ExampleProblem(
        3, "jump",
        BVProblem(_jump, (-1.0, 1.0), (-1.0, 1.0), _jump_dy, _zero, _zero_hess,
                  {"y": lambda x: (m + 0.5) * x + (m - 0.5) if x < 0
                   else m * math.exp(x) - 0.5 * math.exp(-x)}, "jump"),
        {"m": m}, (0.0,),
    ))

    pi = math.pi
    out.append(ExampleProblem(
        4, "abs-two",
        BVProblem(_neg_abs, (0.0, 4.0), (0.0, -2.0), _neg_abs_dy, _zero, _zero_hess,
                  {"y1": lambda x: -2.0 * math.sinh(x) / math.sinh(4.0),
                   "y2": lambda x: -2.0 * math.sin(x) / math.sinh(pi - 4.0) if x <= pi
                   else -2.0 * math.sinh(pi - x) / math.sinh(pi - 4.0)}, "abs-two"),
        {}, (pi,),
    ))

    ca, cb = _ex5_constant(1.1508), _ex5_constant(59.827)
    out.append(ExampleProblem(
        5, "exp",
        BVProblem(_neg_exp, (0.0, 1.0), (0.0, 0.0), _neg_exp, _zero, _neg_exp_hess,
                  {"y1": _ex5_solution(ca), "y2": _ex5_solution(cb)}, "exp"),
        {"c1": ca, "c2": cb},
    ))

    out.append(ExampleProblem(
        6, "heaviside",
        BVProblem(_heaviside, (-1.0, 1.0), (-1.0, 1.0), _zero, _zero, _zero_hess,
                  {"y": lambda x: -0.5 * x * x + 0.5 * x if x < 0 else 0.5 * x * x + 0.5 * x},
                  "heaviside"),
        {}, (0.0,),
    ))
    for ex in out:
        _self_check(ex)
    return out


_REGISTRY: list[ExampleProblem] | None = None


def register_examples() -> list[ExampleProblem]:
    """The six example problems, built and self-checked once per process."""
    global _REGISTRY
    if _REGISTRY is None:
        _REGISTRY = _build_examples()
    return list(_REGISTRY)


EXAMPLE_NAMES = ("book", "abs-bvp", "jump", "abs-two", "exp", "heaviside")


def get_example(key: str | int) -> ExampleProblem:
    for ex in register_examples():
        if key == ex.name or key == ex.number or str(key) == str(ex.number):
            return ex
    raise KeyError(f"unknown example {key!r}; choose from {', '.join(EXAMPLE_NAMES)}")


def newton_references(ex: ExampleProblem, system: DiscreteSystem) -> list[np.ndarray | None]:
    """Discrete solutions reached by Newton from each sampled true solution.

    ``None`` where Newton does not converge (Example 6 with a node at 0 has
    no discrete solution).
    """
    refs = []
    for y in ex.sampled_solutions(system):
        res = newton_solve(system, y)
        refs.append(res.solution if res.converged else None)
    return refs


# ------------------------------------------------------------ basins


@dataclass(frozen=True)
class BasinTable:
    """Outcome per ``(method, N, lambda)``: ``"1"``, ``"2"``, ``"S"`` or ``"D"``."""

    example: str
    rows: tuple[tuple[str, int, float, str], ...]

    def outcomes(self, method: str, n: int) -> list[str]:
        return [o for m, nn, _, o in self.rows if m == method and nn == n]

    def lambdas(self, method: str, n: int) -> list[float]:
        return [lam for m, nn, lam, _ in self.rows if m == method and nn == n]

    def merged(self, other: "BasinTable") -> "BasinTable":
        return BasinTable(self.example, self.rows + other.rows)

    def to_csv(self) -> str:
        lines = ["method,N,lambda,outcome"]
        lines += [f"{m},{n},{lam:g},{o}" for m, n, lam, o in self.rows]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        keys = list(dict.fromkeys((m, n) for m, n, _, _ in self.rows))
        if not keys:
            return ""
        lams = self.lambdas(*keys[0])
        head = ["lambda"] + [f"{lam:g}" for lam in lams]
        body = [[f"{m.upper() if m != 'newton' else 'Newton'} N={n}"] + self.outcomes(m, n) for m, n in keys]
        widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [head] + body) + "\n"


def _match(values: np.ndarray, truths: Sequence[np.ndarray], interval, n) -> str | None:
    hits = [k for k, t in enumerate(truths) if error_metric(values, t, interval, n) < MATCH_EPS]
    return str(hits[0] + 1) if len(hits) == 1 else None


def classify_newton(ex: ExampleProblem, n: int, lam: float) -> str:
    system = ex.system(n)
    res = newton_solve(system, start_vector(system, StartSpec("lambda_chi", lam)))
    if not res.converged:
        return "D"
    return _match(res.solution, ex.sampled_solutions(system), ex.problem.interval, n) or "S"


def classify_product(ex: ExampleProblem, engine: str, n: int, lam: float, cfg: SolverConfig | None = None) -> str:
    """Run DR or AP from ``lam`` and classify the destination.

    Runs up to 1.5e5 iterates; an unmatched run is extended to 5e5 before
    it is declared stuck. A run that comes within ``eps_tol`` of a discrete
    solution stops early.
    """
    system = ex.system(n)
    truths = ex.sampled_solutions(system)
    refs = newton_references(ex, system)
    ref_idx = [k for k, r in enumerate(refs) if r is not None]
    base = cfg or SolverConfig()
    cfg1 = replace(base, engine=Engine(engine), max_outer=BASIN_FIRST_CAP)
    tr = run(system, cfg1, StartSpec("lambda_chi", lam), [refs[k] for k in ref_idx], truths)
    if tr.status is Status.DIVERGED:
        return "D"
    if tr.status is Status.CONVERGED and tr.matched_reference is not None:
        return str(ref_idx[tr.matched_reference] + 1)
    got = _match(tr.final, truths, ex.problem.interval, n)
    if got is not None:
        return got
    cfg2 = replace(cfg1, max_outer=BASIN_FINAL_CAP - tr.n_iterations)
    resume = tr.final_state if Engine(engine) is Engine.DR else tr.final
    if resume is None:
        return "D"
    tr = run(system, cfg2, resume, [refs[k] for k in ref_idx], truths)
    if tr.status is Status.DIVERGED:
        return "D"
    if tr.status is Status.CONVERGED and tr.matched_reference is not None:
        return str(ref_idx[tr.matched_reference] + 1)
    return _match(tr.final, truths, ex.problem.interval, n) or "S"


def _basin_cell(args):
    name, method, n, lam, cfg = args
    ex = get_example(name)
    if method == "newton":
        return classify_newton(ex, n, lam)
    return classify_product(ex, method, n, lam, cfg)


def _default_workers() -> int:
    env = os.environ.get("BVP_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _warm_kernels(ex: ExampleProblem) -> None:
    # compile in the parent so forked workers inherit the machine code
    system = ex.system(5)
    for eng in (Engine.DR, Engine.AP):
        run(system, SolverConfig(engine=eng, max_outer=2), StartSpec())


def basin_experiment(
    example: ExampleProblem | str,
    method: str,
    n: int,
    lambdas: Sequence[float],
    workers: int | None = None,
    cfg: SolverConfig | None = None,
) -> BasinTable:
    """Destination of ``method`` from each start ``lambda`` on the interior."""
    ex = example if isinstance(example, ExampleProblem) else get_example(example)
    if method not in ("newton", "dr", "ap"):
        raise ValueError(f"unknown method {method!r}")
    jobs = [(ex.name, method, n, float(lam), cfg) for lam in lambdas]
    workers = _default_workers() if workers is None else workers
    if workers > 1 and method != "newton" and len(jobs) > 1:
        _warm_kernels(ex)
        with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("fork")) as pool:
            outcomes = list(pool.map(_basin_cell, jobs))
    else:
        outcomes = [_basin_cell(j) for j in jobs]
    return BasinTable(ex.name, tuple((method, n, lam, o) for (_, _, _, lam, _), o in zip(jobs, outcomes)))


# ------------------------------------------------------------ summary


SUMMARY_COLUMNS = ("dr_per_decade", "ap_per_decade", "dr_wave", "dr_ratio", "ap_ratio", "newton_true_eps")


@dataclass(frozen=True)
class SummaryRow:
    example: int
    name: str
    n: int
    dr_per_decade: float
    ap_per_decade: float
    dr_wave: float
    dr_ratio: float
    ap_ratio: float
    newton_true_eps: float

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, c) for c in SUMMARY_COLUMNS)


def newton_true_error(ex: ExampleProblem, n: int) -> float:
    """ε between the Newton solution from the affine start and the nearest true solution."""
    system = ex.system(n)
    res = newton_solve(system, system.affine())
    return min(error_metric(res.iterates[-1], t, ex.problem.interval, n) for t in ex.sampled_solutions(system))


def _monotone_rate(trace: SolveTrace) -> float:
    # averaged projections decay without oscillating: fit the raw series
    start = int(analysis.TRANSIENT * trace.n_iterations)
    its = trace.iterations[start:]
    v = trace.rel_err[start:]
    ok = v > 0
    ps = analysis.PeakSeries(its[ok], v[ok])
    return analysis.decade_rate(ps)


def summary_row(
    ex: ExampleProblem,
    n: int,
    max_outer: int = BASIN_FINAL_CAP,
    eps_stop: float = 1e-20,
    cfg: SolverConfig | None = None,
) -> SummaryRow:
    """Statistics from DR and AP runs from the affine start, up to ``max_outer`` iterates.

    Both runs stop early once their error to the Newton solution falls below
    ``eps_stop`` (or the iteration reaches a fixed point).
    """
    system = ex.system(n)
    newton = newton_solve(system, system.affine())
    refs = [newton.solution] if newton.converged else []
    weight = (system.grid.b - system.grid.a) / (n + 1)
    cols = {}
    for eng in (Engine.DR, Engine.AP):
        run_cfg = replace(cfg or SolverConfig(), engine=eng, max_outer=max_outer, eps_tol=eps_stop, stop_rel=0.0)
        tr = run(system, run_cfg, StartSpec(), refs)
        peaks = analysis.detect_peaks(tr) if tr.n_iterations >= 3 else analysis.PeakSeries.empty()
        rate = analysis.decade_rate(peaks) if eng is Engine.DR else _monotone_rate(tr)
        err = np.sqrt(tr.err_to_newton / weight)
        cols[eng] = (rate, analysis.mean_spacing(peaks), analysis.error_ratio(err, tr.rel_err))
    return SummaryRow(
        ex.number, ex.name, n,
        cols[Engine.DR][0], cols[Engine.AP][0], cols[Engine.DR][1],
        cols[Engine.DR][2], cols[Engine.AP][2],
        newton_true_error(ex, n),
    )


def _summary_cell(args):
    name, n, max_outer, cfg = args
    return summary_row(get_example(name), n, max_outer, cfg=cfg)


def summary_experiment(
    examples: Sequence[ExampleProblem | str] | None = None,
    ns: Sequence[int] = (11, 21),
    max_outer: int = BASIN_FINAL_CAP,
    workers: int | None = None,
    cfg: SolverConfig | None = None,
) -> list[SummaryRow]:
    exs = register_examples() if examples is None else [
        e if isinstance(e, ExampleProblem) else get_example(e) for e in examples
    ]
    jobs = [(ex.name, n, max_outer, cfg) for ex in exs for n in ns]
    workers = _default_workers() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        for ex in exs:
            _warm_kernels(ex)
        with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("fork")) as pool:
            return list(pool.map(_summary_cell, jobs))
    return [_summary_cell(j) for j in jobs]


def summary_csv(rows: Sequence[SummaryRow]) -> str:
    lines = ["example,N," + ",".join(SUMMARY_COLUMNS)]
    for r in rows:
        lines.append(f"{r.example},{r.n}," + ",".join("" if math.isnan(v) else repr(float(v)) for v in r.values()))
    return "\n".join(lines) + "\n"


def summary_text(rows: Sequence[SummaryRow]) -> str:
    head = ["Ex", "N", "DR", "AP", "wave", "DR ratio", "AP ratio", "true err"]
    body = [[str(r.example), str(r.n)] + ["-" if math.isnan(v) else f"{v:.2g}" for v in r.values()] for r in rows]
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in [head] + body) + "\n"


# ------------------------------------------------------------ ellipse / line demo


@dataclass(frozen=True, eq=False)
class DemoTrace:
    """DR iterates ``x_n`` in the plane, their shadows on the line and diagnostics.

    ``rel_err[n-1] = |P_L x_n - P_L x_{n-1}|`` and ``step[n-1] = |x_n - x_{n-1}|``.
    """

    iterates: np.ndarray
    shadows: np.ndarray
    rel_err: np.ndarray
    step: np.ndarray
    converged: bool

    def to_csv(self) -> str:
        lines = ["iteration,x,y,shadow_x,shadow_y,rel_err"]
        for k, (p, q) in enumerate(zip(self.iterates, self.shadows)):
            rel = "" if k == 0 else repr(float(self.rel_err[k - 1]))
            lines.append(f"{k},{p[0]!r},{p[1]!r},{q[0]!r},{q[1]!r},{rel}")
        return "\n".join(lines) + "\n"


def ellipse_line_demo(
    ellipse,
    line,
    start,
    max_iter: int = 2000,
    tol: float = 1e-12,
) -> DemoTrace:
    """Two-set DR ``x -> (x + R_E R_L x)/2`` for a line ``L`` and an ellipse ``E``.

    Parameters
    ----------
    ellipse : (semi_axes, center)
    line : (point, direction)
    start : array_like of length 2

    The line is reflected first, so its projection of the iterate is the
    approximate intersection point. Stops, without recording the final
    step, once both the iterate and that point move by less than ``tol``.
    """
    axes, center = ellipse
    axes = np.asarray(axes, dtype=float)
    if axes.shape != (2,) or np.any(axes <= 0) or not np.all(np.isfinite(axes)):
        raise ValueError("ellipse semi-axes must be two positive numbers")
    point, direction = (np.asarray(v, dtype=float) for v in line)
    dn = np.linalg.norm(direction)
    if dn == 0:
        raise ValueError("line direction must be nonzero")
    d = direction / dn
    surface = ImplicitSurface.ellipsoid(axes, center)
    pcfg = ProjectionConfig(tol=1e-14, max_iter=100)

    def p_line(x):
        return point + d * float((x - point) @ d)

    x = np.asarray(start, dtype=float).copy()
    its, shs, rel, step = [x.copy()], [p_line(x)], [], []
    converged = False
    for _ in range(max_iter):
        r1 = 2 * p_line(x) - x
        r2 = 2 * project_lagrange_newton(r1, surface, pcfg).point - r1
        nxt = 0.5 * (x + r2)
        sh = p_line(nxt)
        r, s_ = float(np.linalg.norm(sh - shs[-1])), float(np.linalg.norm(nxt - x))
        if r < tol and s_ < tol:
            converged = True
            break
        rel.append(r)
        step.append(s_)
        x = nxt
        its.append(x.copy())
        shs.append(sh)
    return DemoTrace(np.array(its), np.array(shs), np.array(rel), np.array(step), converged)
