"""Simulation and rare-event estimation for branching processes in random environment."""

__version__ = "0.1.0"

from .envmodel import (
    DomainError,
    EnvModel,
    FiniteTable,
    LogNormal,
    Offspring,
    TwoPoint,
    env_moment,
    tilt,
)
from .rates import RegimeError, legendre, rate_pack, solve_alpha_from_rho, solve_cramer
from .estimate import Estimate, estimate_ld_prob, estimate_passage_prob, prefactor_C1
from .verify import check_report, run_experiment

__all__ = [
    "DomainError",
    "EnvModel",
    "Estimate",
    "FiniteTable",
    "LogNormal",
    "Offspring",
    "RegimeError",
    "TwoPoint",
    "check_report",
    "env_moment",
    "estimate_ld_prob",
    "estimate_passage_prob",
    "legendre",
    "prefactor_C1",
    "rate_pack",
    "run_experiment",
    "solve_alpha_from_rho",
    "solve_cramer",
    "tilt",
]
