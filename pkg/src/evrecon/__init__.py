"""Event-camera 3D reconstruction: events to intensity images, sparse SfM and dense MVS."""

from .errors import EvreconError
from .events import EventStream, SensorGeometry, encode_voxel_grid, read_events, window_by_count
from .pipeline import load_config, run_pipeline

__version__ = "0.1.0"

__all__ = ["EvreconError", "EventStream", "SensorGeometry", "encode_voxel_grid", "read_events",
           "window_by_count", "load_config", "run_pipeline", "__version__"]
