"""
Command-line entry point.

    bvpfeas solve --example book --engine dr --n 21 --out trace.csv
    bvpfeas table --which abs-two --n 11 21
    bvpfeas demo --ellipse 1,1 --line 0,0,1,0 --start 2,0.5
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as ex
from .projection import ProjectionConfig, ProjectionMethod
from .solvers import Engine, Formulation, SolverConfig, StartSpec, Status, run

EXIT_USAGE = 64
EXIT_CODES = {
    Status.CONVERGED: 0,
    Status.STUCK: 2,
    Status.DIVERGED: 3,
    Status.CYCLING: 4,
    Status.MAX_ITER: 5,
}

ABS_TWO_LAMBDAS = (0.01, 0.1, 0.5, 1, 2, 3, 4, 5, 6, 7, 8, 9)
EXP_LAMBDAS = (-1, 0, 1, 2, 3, 4, 5, 6, 7)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str, counts: tuple[int, ...], what: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{what}: expected comma-separated numbers, got {text!r}") from None
    if len(vals) not in counts or not all(math.isfinite(v) for v in vals):
        raise UsageError(f"{what}: expected {' or '.join(map(str, counts))} finite numbers")
    return vals


def _workers(flag: int | None) -> int:
    env = os.environ.get("BVP_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"BVP_WORKERS must be an integer, got {env!r}") from None
    return flag if flag else (os.cpu_count() or 1)


def write_manifest(path: Path, fields: dict) -> None:
    with open(path, "w") as fh:
        for k, v in fields.items():
            fh.write(f"{k}={v}\n")


def cmd_solve(args) -> int:
    try:
        start = StartSpec.parse(args.start)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    example = ex.get_example(args.example)
    system = example.system(args.n)
    cfg = SolverConfig(
        engine=Engine(args.engine),
        formulation=Formulation.FULL_N if args.formulation == "full" else Formulation.THREE_SET,
        projection=ProjectionConfig(
            method=ProjectionMethod.LAGRANGE_NEWTON if args.proj == "lagrange" else ProjectionMethod.MERIT_DESCENT,
            tol=args.tol,
            max_iter=args.inner_max_iter,
            adaptive_alpha=args.adaptive_alpha if args.adaptive_alpha > 0 else None,
        ),
        max_outer=args.max_iter,
        trace_stride=args.stride,
        workers=_workers(args.workers),
    )
    refs = [r for r in ex.newton_references(example, system) if r is not None]
    t0 = time.perf_counter()
    trace = run(system, cfg, start, refs, backend=args.backend)
    wall = time.perf_counter() - t0
    out = Path(args.out)
    trace.write_csv(out)
    manifest = out.with_name(out.name + ".manifest")
    write_manifest(manifest, {
        "example": example.name,
        "engine": cfg.engine.value,
        "formulation": cfg.formulation.value,
        "n": args.n,
        "start": str(start),
        "projection": cfg.projection.method.value,
        "projection_tol": repr(cfg.projection.tol),
        "projection_max_iter": cfg.projection.max_iter,
        "adaptive_alpha": "" if cfg.projection.adaptive_alpha is None else repr(cfg.projection.adaptive_alpha),
        "max_iter": cfg.max_outer,
        "stop_rel": repr(cfg.stop_rel),
        "eps_tol": repr(cfg.eps_tol),
        "stride": cfg.trace_stride,
        "backend": args.backend,
        "deterministic": "true",
        "trace": str(out),
        "iterations": trace.n_iterations,
        "status": trace.status.value,
        "wall_seconds": f"{wall:.3f}",
    })
    final_eps = trace.err_to_newton[-1] if trace.err_to_newton.size else math.nan
    print(
        f"{example.name} {cfg.engine.value} N={args.n}: {trace.status.value} after "
        f"{trace.n_iterations} iterations (eps to Newton {final_eps:.3g}); trace -> {out}"
    )
    return EXIT_CODES[trace.status]


def cmd_table(args) -> int:
    workers = _workers(args.workers)
    if args.which == "summary":
        rows = ex.summary_experiment(ns=args.n, max_outer=args.max_iter, workers=workers)
        csv_text, text = ex.summary_csv(rows), ex.summary_text(rows)
    else:
        example = ex.get_example(args.which)
        if args.lambdas:
            lams = _floats(args.lambdas, tuple(range(1, 1000)), "--lambdas")
        elif args.which == "abs-two":
            lams = list(ABS_TWO_LAMBDAS) + [-v for v in ABS_TWO_LAMBDAS]
        else:
            lams = list(EXP_LAMBDAS)
        table = None
        for method in ("newton", "dr", "ap"):
            for n in args.n:
                part = ex.basin_experiment(example, method, n, lams, workers=workers)
                table = part if table is None else table.merged(part)
        csv_text, text = table.to_csv(), table.to_text()
    if args.out:
        base = Path(args.out)
        base.with_suffix(".csv").write_text(csv_text)
        base.with_suffix(".txt").write_text(text)
    sys.stdout.write(csv_text + "\n" + text)
    return 0


GNUPLOT = """\
set datafile separator ','
set size ratio -1
set key outside
set parametric
set trange [0:2*pi]
plot {a}*cos(t)+({cx}),{b}*sin(t)+({cy}) title 'ellipse', \\
     ({px})+t*({dx})-pi*({dx}),({py})+t*({dy})-pi*({dy}) title 'line', \\
     '{csv}' using 2:3 every ::0 with linespoints title 'DR iterates', \\
     '{csv}' using 4:5 with points title 'shadow'
pause -1
"""


def cmd_demo(args) -> int:
    ell = _floats(args.ellipse, (2, 4), "--ellipse")
    line = _floats(args.line, (4,), "--line")
    start = _floats(args.start, (2,), "--start")
    if ell[0] <= 0 or ell[1] <= 0:
        raise UsageError("--ellipse: semi-axes must be positive")
    if line[2] == 0 and line[3] == 0:
        raise UsageError("--line: direction must be nonzero")
    center = ell[2:] if len(ell) == 4 else [0.0, 0.0]
    trace = ex.ellipse_line_demo((ell[:2], center), (line[:2], line[2:]), start, max_iter=args.max_iter, tol=args.tol)
    out = Path(args.out)
    out.write_text(trace.to_csv())
    script = out.with_suffix(".gp")
    script.write_text(GNUPLOT.format(
        a=ell[0], b=ell[1], cx=center[0], cy=center[1],
        px=line[0], py=line[1], dx=line[2], dy=line[3], csv=out.name,
    ))
    last = trace.shadows[-1]
    print(
        f"{'converged' if trace.converged else 'not converged'} after {len(trace.rel_err)} steps; "
        f"shadow ({last[0]:.12g}, {last[1]:.12g}); trace -> {out}, script -> {script}"
    )
    return 0 if trace.converged else EXIT_CODES[Status.MAX_ITER]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bvpfeas", description="Projection methods for discretized boundary value problems.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", help="run one solver and write its trace")
    s.add_argument("--example", required=True, choices=ex.EXAMPLE_NAMES)
    s.add_argument("--engine", default="dr", choices=[e.value for e in Engine])
    s.add_argument("--formulation", default="three-set", choices=["full", "three-set"])
    s.add_argument("--n", type=int, default=21)
    s.add_argument("--start", default="affine", help="'affine' or 'lambda:REAL'")
    s.add_argument("--proj", default="lagrange", choices=["lagrange", "descent"])
    s.add_argument("--tol", type=float, default=1e-10, help="projection tolerance")
    s.add_argument("--inner-max-iter", type=int, default=30)
    s.add_argument("--adaptive-alpha", type=float, default=0.5, help="0 disables the adaptive tolerance")
    s.add_argument("--max-iter", type=int, default=500_000)
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--out", default="trace.csv")
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--backend", default="auto", choices=["auto", "kernel", "python"])
    s.set_defaults(func=cmd_solve)

    t = sub.add_parser("table", help="reproduce a basin or summary table")
    t.add_argument("--which", required=True, choices=["abs-two", "exp", "summary"])
    t.add_argument("--n", type=int, nargs="+", default=[11, 21])
    t.add_argument("--lambdas", default=None, help="comma-separated starting levels")
    t.add_argument("--max-iter", type=int, default=500_000, help="iteration cap for summary runs")
    t.add_argument("--out", default=None, help="write OUT.csv and OUT.txt")
    t.add_argument("--workers", type=int, default=None)
    t.set_defaults(func=cmd_table)

    d = sub.add_parser("demo", help="DR for an ellipse and a line in the plane")
    d.add_argument("--ellipse", required=True, help="a,b[,cx,cy]")
    d.add_argument("--line", required=True, help="px,py,dx,dy")
    d.add_argument("--start", required=True, help="x,y")
    d.add_argument("--max-iter", type=int, default=2000)
    d.add_argument("--tol", type=float, default=1e-12)
    d.add_argument("--out", default="demo.csv")
    d.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"bvpfeas: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        # invalid numeric settings surface from config validation
        print(f"bvpfeas: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
