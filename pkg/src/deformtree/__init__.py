"""Kinodynamic planning with spatio-temporally deformable trajectory trees."""

from .deform import DeformSettings, Mode, PenaltyConfig, Variant, deform_unit, select_units
from .env_field import DistanceField, Environment, OccupancyGrid, check_edge, load_map, save_map
from .maps import MapGenerationError, MapSpec, generate_map
from .nsopt import NsoptProblem, NsoptResult, minimize
from .poly_edge import PolyEdge, optimal_duration, solve_edge
from .traj_tree import PlannerConfig, RunReport, Scheme, TrajTree, plan

__all__ = [
    "DeformSettings",
    "DistanceField",
    "Environment",
    "MapGenerationError",
    "MapSpec",
    "Mode",
    "NsoptProblem",
    "NsoptResult",
    "OccupancyGrid",
    "PenaltyConfig",
    "PlannerConfig",
    "PolyEdge",
    "RunReport",
    "Scheme",
    "TrajTree",
    "Variant",
    "check_edge",
    "deform_unit",
    "generate_map",
    "load_map",
    "minimize",
    "optimal_duration",
    "plan",
    "save_map",
    "select_units",
    "solve_edge",
]
