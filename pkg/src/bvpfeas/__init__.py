"""Projection and Douglas-Rachford methods for finite-difference boundary value problems."""

from .discretization import BVProblem, DiscreteSystem, Grid, Hypersurface, build_grid, discretize
from .experiments import error_metric, get_example, register_examples
from .projection import ProjectionConfig, ProjectionMethod, project, reflect
from .solvers import Engine, Formulation, SolverConfig, SolveTrace, StartSpec, Status, newton_solve, run

__version__ = "0.1.0"

__all__ = [
    "BVProblem",
    "DiscreteSystem",
    "Engine",
    "Formulation",
    "Grid",
    "Hypersurface",
    "ProjectionConfig",
    "ProjectionMethod",
    "SolveTrace",
    "SolverConfig",
    "StartSpec",
    "Status",
    "build_grid",
    "discretize",
    "error_metric",
    "get_example",
    "newton_solve",
    "project",
    "reflect",
    "register_examples",
    "run",
]
