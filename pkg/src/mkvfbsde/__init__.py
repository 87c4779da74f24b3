"""Neural-network solvers for McKean-Vlasov forward-backward SDEs."""

from .errors import ConfigError, DivergenceError, DomainError, UsageError
from .models import build_model, reference_mean
from .sde import TimeGrid
from .solvers import RunReport, SolverConfig, solve

__all__ = [
    "ConfigError",
    "DivergenceError",
    "DomainError",
    "UsageError",
    "RunReport",
    "SolverConfig",
    "TimeGrid",
    "build_model",
    "reference_mean",
    "solve",
]
