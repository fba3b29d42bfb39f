"""Exception hierarchy shared by every diva module."""


class DivaError(Exception):
    """Base class for all errors raised by the package."""


class DomainError(DivaError, ValueError):
    """Argument outside the mathematical domain of a function."""


class ShapeError(DivaError, ValueError):
    """Array shapes or row counts do not line up."""


class ContractError(DivaError, ValueError):
    """A documented precondition of an operation was violated."""


class NumericError(DivaError, ArithmeticError):
    """A computation produced NaN or infinite values."""


class DegeneratePosteriorError(NumericError):
    """Posterior has no finite expected variance (Gamma shape <= 1)."""


class ParseError(DivaError, ValueError):
    """Input file could not be parsed."""


class ConfigError(DivaError, ValueError):
    """Experiment configuration is invalid."""
