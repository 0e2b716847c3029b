"""Data-driven distributionally robust stochastic optimal power flow."""

__version__ = "0.1.0"

from .assembler import DroQp, RiskConfig, Solution, assemble, solve
from .dro import AmbiguityConfig, ForecastDataset, SupportPolytope, empirical_cvar
from .network import CaseValidationError, HorizonModel, NetworkCase, validate_case
from .policy import AffinePolicy, StructuralInfeasibilityError, causality_mask

__all__ = [
    "AffinePolicy",
    "AmbiguityConfig",
    "CaseValidationError",
    "DroQp",
    "ForecastDataset",
    "HorizonModel",
    "NetworkCase",
    "RiskConfig",
    "Solution",
    "StructuralInfeasibilityError",
    "SupportPolytope",
    "assemble",
    "causality_mask",
    "empirical_cvar",
    "solve",
    "validate_case",
]
