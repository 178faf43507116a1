"""Differentially private filtering for multi-participant linear systems."""

from .control import FilterRealization, StateSpaceSystem
from .exceptions import ConvergenceError, DimensionError, DomainError
from .privacy import AdjacencyPolicy, PrivacyBudget

__all__ = [
    "StateSpaceSystem",
    "FilterRealization",
    "PrivacyBudget",
    "AdjacencyPolicy",
    "DimensionError",
    "DomainError",
    "ConvergenceError",
]

__version__ = "0.1.0"
