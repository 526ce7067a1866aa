"""bevjoint: camera-to-BEV joint 3D detection and semantic occupancy engine."""

__version__ = "0.1.0"

from .boxes import Box3D
from .config import EngineConfig, ModelConfig, OccGridSpec, TrainConfig
from .network import PerceptionModel
from .tensor import ConfigurationError, DataError, DenseTensor, Parameter
from .view_transform import BevGridSpec, CameraParams, DepthBinSpec, LiftSplatPlan

__all__ = [
    "BevGridSpec",
    "Box3D",
    "CameraParams",
    "ConfigurationError",
    "DataError",
    "DenseTensor",
    "DepthBinSpec",
    "EngineConfig",
    "LiftSplatPlan",
    "ModelConfig",
    "OccGridSpec",
    "Parameter",
    "PerceptionModel",
    "TrainConfig",
]
