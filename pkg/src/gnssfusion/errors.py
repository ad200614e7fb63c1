"""Exception types raised by the library."""


class GnssFusionError(Exception):
    """Base class for all library errors."""


class NearGeocenter(GnssFusionError):
    """ECEF point too close to the geocenter for a geodetic conversion."""


class InvalidTravelTime(GnssFusionError):
    """Signal travel time outside the physically plausible range."""


class BelowElevationCutoff(GnssFusionError):
    """Satellite below the configured elevation cutoff."""


class NoPivotAvailable(GnssFusionError):
    """No satellite in the group maintains lock over the requested interval."""


class EmptyWindow(GnssFusionError):
    """Not enough IMU samples to preintegrate an interval."""


class NonMonotonicTime(GnssFusionError):
    """Timestamps are not strictly increasing."""


class InsufficientImu(GnssFusionError):
    """IMU samples do not cover the inter-epoch interval densely enough."""


class NumericalFailure(GnssFusionError):
    """Non-finite cost or Jacobian encountered during optimization."""

    def __init__(self, message, factor=None):
        super().__init__(message)
        self.factor = factor


class SingularMarginalBlock(GnssFusionError):
    """A removed variable block is structurally unconstrained."""


class ConfigError(GnssFusionError):
    """Invalid scenario or estimator configuration."""


class LogFormatError(GnssFusionError):
    """Malformed measurement log or trajectory file."""

    def __init__(self, message, record_number=None):
        super().__init__(message)
        self.record_number = record_number


class EvaluationError(GnssFusionError):
    """Trajectory and ground truth cannot be compared."""
