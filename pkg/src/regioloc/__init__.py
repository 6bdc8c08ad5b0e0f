"""Regional continuous location with preferences, as mixed-integer second-order cone programs."""

from .geometry import Region, SOCConstraint, eval_norm
from .prefs import (Cell, DistancePreference, InfeasibleThreshold, LinearPreference, ProductionPreference,
                    Subdivision, normalize)
from .conic import ConicProblem, StandardForm
from .socp import ConicSolution, SolverConfig, Status, get_engine, solve
from .mibb import BnBConfig, MISolution, MIStatus, solve_mi
from .model import (Instance, Solution, build_crclpp, build_rclpp, solve_instance, validate_solution)
from .gen import GenConfig, generate, load, save

__version__ = "0.1.0"

__all__ = [
    "Region", "SOCConstraint", "eval_norm",
    "Cell", "Subdivision", "LinearPreference", "DistancePreference", "ProductionPreference",
    "InfeasibleThreshold", "normalize",
    "ConicProblem", "StandardForm", "ConicSolution", "SolverConfig", "Status", "get_engine", "solve",
    "BnBConfig", "MISolution", "MIStatus", "solve_mi",
    "Instance", "Solution", "build_rclpp", "build_crclpp", "solve_instance", "validate_solution",
    "GenConfig", "generate", "load", "save",
]
