class MoyalError(Exception):
    """Base class for all simulator errors."""


class OrderOverflow(MoyalError):
    """Requested derivative + accuracy order exceeds the configured maximum.

    Lower the observation window or the mesh resolution.
    """

    def __init__(self, derivative: int, accuracy: int, maximum: int):
        self.derivative = derivative
        self.accuracy = accuracy
        self.maximum = maximum
        super().__init__(
            f"stencil order d={derivative}, m={accuracy} exceeds combined maximum {maximum}"
        )


class InvalidGrid(MoyalError):
    pass


class GeometryMismatch(MoyalError):
    pass


class OutOfDomain(MoyalError):
    pass


class DimensionMismatch(MoyalError):
    pass


class GridMismatch(MoyalError):
    pass


class Unmeasurable(MoyalError):
    """A measurement slice has no nonlocal constraint left to pin against."""

    def __init__(self, x_index: int, reason: str = "all potential derivatives vanish"):
        self.x_index = x_index
        super().__init__(f"slice x={x_index} is unmeasurable: {reason}")


class NearSingular(MoyalError):
    def __init__(self, message: str, report=None, field=None):
        self.report = report
        self.field = field
        super().__init__(message)


class ConfigError(MoyalError):
    pass


class AcceptanceFailure(MoyalError):
    """One or more checks of a validation or experiment run failed."""

    def __init__(self, failures: list[str]):
        self.failures = failures
        super().__init__("; ".join(failures))
