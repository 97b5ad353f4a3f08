"""Parametric body model, landmark lifter and 2D fitting toolkit."""

from bodylift.body_model import (
    KinematicModel,
    LandmarkLayout,
    PoseState,
    make_toy_model,
)

__all__ = ["KinematicModel", "LandmarkLayout", "PoseState", "make_toy_model"]
__version__ = "0.1.0"
