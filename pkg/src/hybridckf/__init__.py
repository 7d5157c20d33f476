"""Hybrid ODE / neural-network estimation of a retinal circulation model.

The package learns the missing venular pressure equation of a five-compartment
RC model, either by cubature Kalman filtering of the weight-augmented state
(:mod:`hybridckf.ckf`) or by backpropagation through time (:mod:`hybridckf.bptt`).
"""

from hybridckf.errors import (
    ConfigError,
    DegenerateChannel,
    Diverged,
    LayoutMismatch,
    LengthMismatch,
    MissingArtifact,
    NonFinite,
    NotPositiveDefinite,
    SingularInnovation,
    StabilizationFailed,
    TooManyFailures,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateChannel",
    "Diverged",
    "LayoutMismatch",
    "LengthMismatch",
    "MissingArtifact",
    "NonFinite",
    "NotPositiveDefinite",
    "SingularInnovation",
    "StabilizationFailed",
    "TooManyFailures",
]
