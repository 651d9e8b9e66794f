"""Numerical laboratory for correctors of the random conductance model on the lattice."""

from .errors import ConfigurationError, ContractError, ConvergenceError, GeometryError, RCMError
from .env import Environment, EnvironmentSpec, distribution_from_dict, sample_environment

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractError",
    "ConvergenceError",
    "GeometryError",
    "RCMError",
    "Environment",
    "EnvironmentSpec",
    "distribution_from_dict",
    "sample_environment",
    "__version__",
]
