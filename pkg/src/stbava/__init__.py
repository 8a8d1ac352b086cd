"""Spatio-temporal bidirectional audio-visual attention for sound-source segmentation."""
from .config import ABLATIONS, ConfigError, StBavaConfig, ablation, preset
from .model import AvsModel, forward_clip

__all__ = ["ABLATIONS", "AvsModel", "ConfigError", "StBavaConfig", "ablation", "forward_clip", "preset"]
__version__ = "0.1.0"
