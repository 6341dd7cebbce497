import math
import sys

import numpy as np
import pytest

from bvpfeas.discretization import BVProblem, build_grid, discretize


def linear_problem(alpha=0.0, beta=1.0, interval=(0.0, 1.0)):
    zero = lambda x, y, yp: 0.0
    return BVProblem(zero, interval, (alpha, beta), zero, zero, lambda x, y, yp: (0.0, 0.0, 0.0), name="linear")


def make_system(problem, n):
    a, b = problem.interval
    return discretize(problem, build_grid(a, b, n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def unit_circle():
    from bvpfeas.projection import ImplicitSurface

    return ImplicitSurface.ellipsoid([1.0, 1.0])


def angle(a, b):
    c = float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.acos(max(-1.0, min(1.0, c)))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        passed, detail = mod.RESULTS[k]
        terminalreporter.write_line(f"CRITERION {k} {'PASS' if passed else 'FAIL'}: {detail}")
