"""Balanced group softmax and long-tail baselines for linear heads over fixed features."""

from .catalog import (
    DEFAULT_BOUNDARIES,
    ClassCatalog,
    GroupPartition,
    PlainLayout,
    assign_groups,
    bin_of,
    boundaries_for,
)
from .errors import ConfigError, DataError, LabError, NumericalError

__all__ = [
    "DEFAULT_BOUNDARIES",
    "ClassCatalog",
    "ConfigError",
    "DataError",
    "GroupPartition",
    "LabError",
    "NumericalError",
    "PlainLayout",
    "assign_groups",
    "bin_of",
    "boundaries_for",
]

__version__ = "0.1.0"
