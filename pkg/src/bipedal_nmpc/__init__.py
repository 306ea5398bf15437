"""Nonlinear MPC gait generation for a pendulum-plus-flywheel biped model."""
from .assembly import Bounds, StrategyToggles, Weights, build_problem
from .gait import FootstepPlan, ReferenceOverrides, StepSpec
from .pendulum import ModelParams, PendulumState, zmp
from .qcqp import QcqpProblem, SqpSettings, solve_sqp

__all__ = [
    "Bounds", "StrategyToggles", "Weights", "build_problem", "FootstepPlan", "ReferenceOverrides", "StepSpec",
    "ModelParams", "PendulumState", "zmp", "QcqpProblem", "SqpSettings", "solve_sqp",
]
__version__ = "0.1.0"
