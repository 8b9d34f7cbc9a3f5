"""Factorized multimodal fusion with MI-driven disentanglement, at desk scale."""

from .config import RunConfig, desk_config, load_config
from .data import MODALITIES, SyntheticSpec

__version__ = "0.1.0"

__all__ = ["MODALITIES", "RunConfig", "SyntheticSpec", "desk_config", "load_config", "__version__"]
