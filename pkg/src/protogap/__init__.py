"""Layer-equivalence measurement under intervention protocols.

Swap two transformer layers' weights, or delete, average, or share them,
and measure how far the output next-token distribution moves (KL). The
distances drive zero-shot layer pruning and diagnostics.
"""

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    FormatError,
    InterventionError,
    NonFiniteError,
    ProtogapError,
)

__version__ = "0.1.0"

__all__ = [
    "ProtogapError",
    "DimensionError",
    "DomainError",
    "ConfigError",
    "FormatError",
    "InterventionError",
    "ContractError",
    "NonFiniteError",
    "__version__",
]
