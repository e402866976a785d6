"""One verifiable convex-integration step for the inhomogeneous incompressible Euler equations on the 3-torus."""

from .cutoffs import ParameterSchedule, SpatialPartition, TemporalPartition
from .driver import (
    DiagnosticsReport,
    EulerReynoldsState,
    RunConfig,
    bifurcate,
    initial_tuple,
    iterate,
    report,
    step_checks,
)
from .errors import ErrorAssembly, residual

__version__ = "0.1.0"

__all__ = [
    "DiagnosticsReport",
    "ErrorAssembly",
    "EulerReynoldsState",
    "ParameterSchedule",
    "RunConfig",
    "SpatialPartition",
    "TemporalPartition",
    "bifurcate",
    "initial_tuple",
    "iterate",
    "report",
    "residual",
    "step_checks",
]
