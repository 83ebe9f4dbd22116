"""Planar bundle adjustment: joint pose and plane refinement from depth points."""

from .errors import (
    DegenerateFit,
    DegeneratePlane,
    DivergedNaN,
    InfeasibleScene,
    LengthMismatch,
    PBAError,
    SingularSystem,
)
from .geometry import PlaneCP, PlaneHesse, Pose
from .problem import Observation, ProblemGraph, ProblemState, total_cost
from .solver import LMConfig, SolveReport, solve

__all__ = [
    "DegenerateFit",
    "DegeneratePlane",
    "DivergedNaN",
    "InfeasibleScene",
    "LMConfig",
    "LengthMismatch",
    "Observation",
    "PBAError",
    "PlaneCP",
    "PlaneHesse",
    "Pose",
    "ProblemGraph",
    "ProblemState",
    "SingularSystem",
    "SolveReport",
    "solve",
    "total_cost",
]

__version__ = "0.1.0"
