"""Tiny thermal person detection toolkit.

Trains, compresses (structured channel pruning + int8 post-training
quantization) and runs an ultra-lightweight CNN person detector on
32x24 thermal frames, with an EMA background-subtraction front end.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    CorruptionError,
    CoverageError,
    DimensionError,
    FormatError,
    MetricError,
    PruneError,
    StructureError,
    ThermodetError,
    TrainingDivergedError,
    UnsupportedVersionError,
    ValidationError,
)

__all__ = [
    "ConfigError",
    "CorruptionError",
    "CoverageError",
    "DimensionError",
    "FormatError",
    "MetricError",
    "PruneError",
    "StructureError",
    "ThermodetError",
    "TrainingDivergedError",
    "UnsupportedVersionError",
    "ValidationError",
]
