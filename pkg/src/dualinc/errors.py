"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (see :mod:`dualinc.cli`).
"""


class ConfigError(ValueError):
    """Invalid experiment configuration or argument combination."""


class DataError(ValueError):
    """A dataset file is missing, truncated or malformed."""


class NumericError(FloatingPointError):
    """A NaN or Inf appeared in a forward or backward pass."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class GraphConsumedError(RuntimeError):
    """Backward was requested through a graph that was already consumed."""
