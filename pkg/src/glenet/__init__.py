"""Label-uncertainty estimation for 3D bounding-box annotations.

A conditional variational model turns the raw LiDAR points of an annotated
object into a per-dimension variance over plausible ground-truth boxes;
companion pieces consume that variance: probabilistic regression losses, an
uncertainty-aware quality head, and variance-weighted box voting.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    DegenerateInputError,
    DomainError,
    GlenetError,
    NumericFault,
    ShapeError,
    UnsupportedModeError,
)
from .geom import Anchor, BoxEncoding, OrientedBox

__all__ = [
    "Anchor",
    "BoxEncoding",
    "ConfigError",
    "DataError",
    "DegenerateInputError",
    "DomainError",
    "GlenetError",
    "NumericFault",
    "OrientedBox",
    "ShapeError",
    "UnsupportedModeError",
    "__version__",
]
