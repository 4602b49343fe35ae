"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Tensor shapes, dimensions, or sizes violate an operation's contract."""


class ContractError(ValueError):
    """A caller-supplied argument violates an operation's contract."""


class ConfigError(ValueError):
    """A configuration value combination is invalid."""


class NumericError(ArithmeticError):
    """A numeric invariant failed (non-finite values, degenerate norms)."""


class DegenerateError(ValueError):
    """Input is degenerate for the requested operation (e.g. zero norm)."""


class FormatError(ValueError):
    """A serialized container violates the file-format invariants."""


class RankError(ValueError):
    """A sample covariance matrix is too rank-deficient to solve."""
