"""Inspection trajectories on occupancy grids and their visibility coverage."""

from .coverage import CSV_HEADER, CoverageCamera, CoverageReport, CoverageRow, LabelledVoxels, coverage_analysis
from .grid import OccupancyGrid, astar, largest_component, move_graph
from .io import load_grid, load_trajectory, occupancy_from_boxes, save_grid, save_trajectory
from .motion import (
    FORWARD,
    LEFT,
    RIGHT,
    AgentTrajectory,
    apply_action,
    bezier_smooth,
    camera_poses,
    quantize,
    replay,
    smooth_trajectory,
    tour_polyline,
)
from .places import PlaceGraph, assign_basins, brushfire, build_place_graph, extract_places
from .postman import Tour, chinese_postman, min_pairing

__all__ = [
    "CSV_HEADER", "CoverageCamera", "CoverageReport", "CoverageRow", "LabelledVoxels", "coverage_analysis",
    "OccupancyGrid", "astar", "largest_component", "move_graph",
    "load_grid", "load_trajectory", "occupancy_from_boxes", "save_grid", "save_trajectory",
    "FORWARD", "LEFT", "RIGHT", "AgentTrajectory", "apply_action", "bezier_smooth", "camera_poses",
    "quantize", "replay", "smooth_trajectory", "tour_polyline",
    "PlaceGraph", "assign_basins", "brushfire", "build_place_graph", "extract_places",
    "Tour", "chinese_postman", "min_pairing",
]
