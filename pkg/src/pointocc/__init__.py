"""Point-query 3D semantic occupancy prediction on synthetic scenes."""

__version__ = "0.1.0"

from . import decoder, diffcore, geometry, losses, metrics, poi, refine, synthworld, train
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    NumericError,
    PointOccError,
    ShapeError,
    VerificationError,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "NumericError",
    "PointOccError",
    "ShapeError",
    "VerificationError",
    "decoder",
    "diffcore",
    "geometry",
    "losses",
    "metrics",
    "poi",
    "refine",
    "synthworld",
    "train",
]
