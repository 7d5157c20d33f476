"""Exception types raised across the package."""


class HybridCKFError(Exception):
    """Base class for package errors."""


class NotPositiveDefinite(HybridCKFError, ValueError):
    """A Cholesky pivot was not strictly positive."""


class StabilizationFailed(HybridCKFError, ValueError):
    """No jitter level in the schedule made a covariance positive definite."""


class NonFinite(HybridCKFError, FloatingPointError):
    """A state, derivative or function value became NaN or infinite."""


class LengthMismatch(HybridCKFError, ValueError):
    """A flat vector does not have the length its layout requires."""


class LayoutMismatch(HybridCKFError, ValueError):
    """A serialized object carries an unknown layout version."""


class Diverged(HybridCKFError, RuntimeError):
    """A filter or optimizer run left its admissible region."""


class SingularInnovation(HybridCKFError, ValueError):
    """The innovation covariance could not be inverted."""


class DegenerateChannel(HybridCKFError, ValueError):
    """A metric normalizer (sum, range or power) of a channel is zero."""


class ConfigError(HybridCKFError, ValueError):
    """An experiment configuration is malformed; ``key`` names the culprit."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class MissingArtifact(HybridCKFError, FileNotFoundError):
    """A file expected in an artifact tree does not exist."""


class TooManyFailures(HybridCKFError, RuntimeError):
    """More than the tolerated fraction of Monte Carlo runs raised."""

    def __init__(self, message, failures):
        super().__init__(message)
        self.failures = failures
