"""Exception types shared across the package."""


class IBNormError(Exception):
    """Base class for all library errors."""


class ShapeError(IBNormError):
    """Operand shapes do not conform to the operation."""


class ContractError(IBNormError):
    """A documented precondition was violated by the caller."""


class ConfigError(IBNormError):
    """Invalid layer/model/run configuration."""


class NumericError(IBNormError):
    """Numerical failure: non-finite values, eigensolver breakdown, broken bound."""


class SaturationError(NumericError):
    """Overflow in a power-transform branch; carries the offending coordinate."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class EstimationError(IBNormError):
    """Mutual-information estimation is impossible (e.g. too few active rows)."""


class GradCheckError(IBNormError):
    """Gradient check produced NaN; carries the offending coordinate."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate
