"""Spectral initialization followed by generalized approximate message passing
(GAMP) for generalized linear models, with its state evolution."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    AssumptionViolation,
    BracketError,
    DivergenceError,
    DomainError,
    InvalidArgument,
    NumericError,
    SpecGampError,
)
