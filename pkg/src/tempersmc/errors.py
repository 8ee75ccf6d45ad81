"""Exception types shared across the package."""


class TemperSmcError(Exception):
    """Base class for all package-specific errors."""


class SimulationDivergenceError(TemperSmcError):
    """A simulated state became non-finite; carries the offending time index."""

    def __init__(self, t: int):
        self.t = t
        super().__init__(f"non-finite state encountered at time index t={t}")


class DegenerateWeightsError(TemperSmcError):
    """Every log-weight in a population is -inf."""


class NumericalDegeneracyError(TemperSmcError):
    """Innovation covariance lost positive definiteness in the Kalman filter."""


class EmptySupportError(TemperSmcError):
    """All grid nodes evaluated to zero posterior mass."""


class InitializationFailureError(TemperSmcError):
    """No prior draw produced a finite likelihood estimate at lambda_0."""


class ResamplingCollapseError(TemperSmcError):
    """Population resampling weights are all degenerate."""


class ConfigError(TemperSmcError):
    """Invalid run configuration; carries the offending field when known."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
