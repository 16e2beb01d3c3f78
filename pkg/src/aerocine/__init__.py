"""Aerial cinematography planning: occupancy mapping, incremental distance
fields, actor forecasting and occlusion-aware trajectory optimisation."""
from . import kernels
from .voxel_world import ChangeSet, GridConfig, OccupancyGrid, RayMeasurement, VoxelState

__version__ = "0.1.0"

__all__ = [
    "ChangeSet", "GridConfig", "OccupancyGrid", "RayMeasurement", "VoxelState", "kernels",
    "__version__",
]
