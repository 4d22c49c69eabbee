"""Small-area causal effect estimation toolkit."""

__version__ = "0.1.0"

from .frames import (
    AreaEstimate,
    ImputedFrame,
    PartitionCounts,
    PopulationFrame,
    UnitRecord,
    Violation,
    partition_counts,
    validate,
)

__all__ = [
    "AreaEstimate",
    "ImputedFrame",
    "PartitionCounts",
    "PopulationFrame",
    "UnitRecord",
    "Violation",
    "partition_counts",
    "validate",
    "__version__",
]
