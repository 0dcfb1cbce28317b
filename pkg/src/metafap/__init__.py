"""Meta-learned, frequency-agnostic surrogate for metasurface T/R/A prediction."""
from .checkpoint import Checkpoint
from .data import Dataset, SplitSpec, build_pools, generate_dataset, preset_split
from .errors import (
    CheckpointError,
    DivergenceError,
    DomainError,
    InsufficientDataError,
    MetafapError,
    SingularNetworkError,
    ValidationError,
)
from .metatrain import MetaConfig, meta_evaluate, meta_train
from .net import Architecture, ModelParams, forward, init_params
from .objective import LossConfig, Metrics
from .oracle import DesignVector, OracleConfig, ResponseTriple, unit_cell_response

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "Checkpoint",
    "CheckpointError",
    "Dataset",
    "DesignVector",
    "DivergenceError",
    "DomainError",
    "InsufficientDataError",
    "LossConfig",
    "MetaConfig",
    "MetafapError",
    "Metrics",
    "ModelParams",
    "OracleConfig",
    "ResponseTriple",
    "SingularNetworkError",
    "SplitSpec",
    "ValidationError",
    "build_pools",
    "forward",
    "generate_dataset",
    "init_params",
    "meta_evaluate",
    "meta_train",
    "preset_split",
    "unit_cell_response",
]
