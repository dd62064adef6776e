"""Distributionally robust statistical verification with imprecise neural networks."""

__version__ = "0.1.0"

from ._validation import InvalidInputError
from .conformal import SplitConformalRegressor
from .explore import UncertaintyExplorer, active_learn
from .guarantee import build_family, coverage_eval, performance_lower_bound
from .inn import ImpreciseNet, ImpreciseNetRegressor
from .verify import Box, BnbConfig

__all__ = [
    "Box",
    "BnbConfig",
    "ImpreciseNet",
    "ImpreciseNetRegressor",
    "InvalidInputError",
    "SplitConformalRegressor",
    "UncertaintyExplorer",
    "active_learn",
    "build_family",
    "coverage_eval",
    "performance_lower_bound",
]
