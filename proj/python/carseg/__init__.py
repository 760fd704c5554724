"""Recurrent open-vocabulary segmentation engine."""

from ._core import *  # noqa: F401,F403
from ._core import BACKGROUND, PipelineConfig, make_backend, make_world, segment, toy_backend_for

__all__ = ["BACKGROUND", "PipelineConfig", "make_backend", "make_world", "segment", "toy_backend_for"]
__version__ = "0.1.0"
