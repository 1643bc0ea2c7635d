"""Partial-reference image quality assessment at desk scale.

Geometric partial quality maps, a reference-conditioned completion network
with its training objective, correlation and fusion evaluation, and
quality-aware supervision masks for splatting trainers.
"""

__version__ = "0.1.0"

from .errors import ConfigError, EmptySupportError, FormatError, NumericError, PRIQAError, StateError
from .types import Camera, Dataset, FeatureMap, Frame, PointMap, QualityMap, WarpResult

__all__ = [
    "__version__",
    "Camera",
    "ConfigError",
    "Dataset",
    "EmptySupportError",
    "FeatureMap",
    "FormatError",
    "Frame",
    "NumericError",
    "PRIQAError",
    "PointMap",
    "QualityMap",
    "StateError",
    "WarpResult",
]
