"""Simulator and analysis toolkit for 4D (data + 3D tensor) hybrid-parallel training."""

from hybrid4d.errors import (
    ConfigError,
    InfeasibleError,
    ProtocolError,
    ShapeError,
    StateError,
)
from hybrid4d.grid import Axis, Coords, Grid, GridConfig, NodeMap, ProcessGroup, build_grid, enumerate_configs

__all__ = [
    "Axis",
    "ConfigError",
    "Coords",
    "Grid",
    "GridConfig",
    "InfeasibleError",
    "NodeMap",
    "ProcessGroup",
    "ProtocolError",
    "ShapeError",
    "StateError",
    "build_grid",
    "enumerate_configs",
]

__version__ = "0.1.0"
