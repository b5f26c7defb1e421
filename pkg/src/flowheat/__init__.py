"""flowheat: heat kernels and functional-inequality verification on evolving
closed manifolds.

Modules follow the pipeline: ``geometry`` (model manifolds and operators),
``flows`` (metric evolution), ``kernels`` (fundamental solutions and oracles),
``logsob`` (log-Sobolev constants, contraction schedules, entropy engine),
``bounds`` (verified kernel bounds), and ``cli`` (scenario runner).
"""

from ._core import BACKEND as CORE_BACKEND
from .flows import FlowTrajectory, GeneralizedFlowSpec, StepControl, evolve
from .geometry import ManifoldModel, MetricState, ScalarField, initial_state
from .kernels import (
    KernelSlice,
    SolverConfig,
    WeightSpec,
    oracle_sphere_kernel,
    oracle_torus_kernel,
    solve_heat_kernel,
    solve_weighted_kernel,
)
from .logsob import LogSobConstants, estimate_sobolev_constant

__version__ = "0.1.0"

__all__ = [
    "CORE_BACKEND",
    "FlowTrajectory",
    "GeneralizedFlowSpec",
    "KernelSlice",
    "LogSobConstants",
    "ManifoldModel",
    "MetricState",
    "ScalarField",
    "SolverConfig",
    "StepControl",
    "WeightSpec",
    "__version__",
    "estimate_sobolev_constant",
    "evolve",
    "initial_state",
    "oracle_sphere_kernel",
    "oracle_torus_kernel",
    "solve_heat_kernel",
    "solve_weighted_kernel",
]
