"""Zero-shot sketch-based image retrieval with a flow-refined conditional VAE on numpy."""

from .config import RunConfig
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    DomainError,
    NumericError,
    ParseError,
    ZssbirError,
)
from .model import ModelBundle, ModelConfig, build_config

__version__ = "0.1.0"
