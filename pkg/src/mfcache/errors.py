"""Exception types shared across the package."""


class MfcacheError(Exception):
    """Base class for package errors."""


class ConfigError(MfcacheError):
    """Invalid or malformed run configuration."""


class CflViolationError(MfcacheError):
    """Explicit time step violates the stability bound."""


class NonConvergenceError(MfcacheError):
    """Fixed-point iteration failed to converge within max_iters."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class BarrierViolationError(MfcacheError):
    """Caching download rate reached the backhaul barrier L*p >= B."""


class NoCoverageError(MfcacheError):
    """No eligible SBS inside the reception ball of the user."""


class MissingArtifactError(MfcacheError):
    """A required artifact from an earlier pipeline stage is absent."""
