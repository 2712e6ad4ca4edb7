"""Error taxonomy for the whole tool.

Every failure mode maps to one of these; the CLI translates them to its
stable exit codes (usage 2, contract mismatch 3, non-finite 4).
"""


class ProtogapError(Exception):
    """Base class for all tool errors."""


class DimensionError(ProtogapError, ValueError):
    """Tensor shapes or vector lengths do not agree."""


class DomainError(ProtogapError, ValueError):
    """Value outside the mathematical domain of an operation."""


class ConfigError(ProtogapError, ValueError):
    """Invalid model configuration or configuration/tensor mismatch."""


class FormatError(ProtogapError, ValueError):
    """Unparseable or inconsistent on-disk artifact."""


class InterventionError(ProtogapError, ValueError):
    """Inconsistent, conflicting, or out-of-range intervention request."""


class ContractError(ProtogapError, ValueError):
    """Evaluation under mismatched evaluator contracts."""


class NonFiniteError(ProtogapError, ArithmeticError):
    """NaN or Inf produced where only finite values are allowed."""
