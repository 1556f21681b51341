"""Voxel-grid point cloud autoencoder with a stochastic sampling decoder, in numpy."""

from .errors import (CheckpointError, ConfigError, ContractError, DimensionError, GeometryError,
                     NumericError, OutOfDomainError, VoxSamplerError)
from .grid import GridSpec
from .model import ModelConfig, ModelParams, decode, encode, init_params, parameter_count, sample_cloud
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "ContractError", "DimensionError", "GeometryError",
    "NumericError", "OutOfDomainError", "VoxSamplerError", "GridSpec", "ModelConfig",
    "ModelParams", "decode", "encode", "init_params", "parameter_count", "sample_cloud",
    "TrainConfig", "train",
]
