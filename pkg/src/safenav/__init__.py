"""Hierarchical safe navigation stack for a planar legged-robot proxy.

Feasibility fields, a multi-rate planner, navigation and reflex command laws,
threat-gated handoff, a barrier-function safety shield and a seeded
Monte-Carlo evaluation harness.
"""

from .fields import (GridMap2p5D, LagrangianWeights, PassabilityField, build_passability_field, hinge,
                     load_map, phi_dyn, phi_env_at, phi_st, relaxed_lagrangian)
from .rand_core import ALGORITHM_ID, SeededStream, derive, uniform
from .randomization import RandomizationProfile
from .state import ActuationBox, Command, ObstacleDisk, RobotState, SafetyGeometry

__version__ = "0.1.0"

__all__ = [
    "ALGORITHM_ID", "ActuationBox", "Command", "GridMap2p5D", "LagrangianWeights", "ObstacleDisk",
    "PassabilityField", "RandomizationProfile", "RobotState", "SafetyGeometry", "SeededStream",
    "build_passability_field", "derive", "hinge", "load_map", "phi_dyn", "phi_env_at", "phi_st",
    "relaxed_lagrangian", "uniform",
]
