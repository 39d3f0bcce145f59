"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific class that applies rather than bare ValueError.
"""


class ShapeError(ValueError):
    """Operand shapes or dtypes are incompatible with an operation."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class GraphConsumedError(RuntimeError):
    """backward() was called twice on the same graph."""


class DegenerateInputError(ValueError):
    """Input is structurally valid but numerically degenerate (e.g. zero vector)."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataFormatError(ValueError):
    """On-disk dataset or checkpoint content failed validation."""
