"""Desk-scale NAM-to-speech pipeline: ground-truth simulation, Seq2Seq conversion and evaluation."""

from .errors import ConfigError, ContractError, DimensionError, FormatError, NamError, NonFiniteError
from .settings import PipelineConfig, load_config, settings

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "FormatError",
    "NamError",
    "NonFiniteError",
    "PipelineConfig",
    "load_config",
    "settings",
]
