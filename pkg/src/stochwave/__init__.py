"""Finite-dimensional stochastic wave equation with acoustic boundary conditions.

A potential field on an interval or y-periodic strip, coupled on part of the
boundary to locally reacting damped oscillators driven by additive noise.
"""

__version__ = "0.1.0"

from .assembly import OperatorSet, PhysParams, assemble, energy
from .config import ConfigError, ExperimentConfig, load_config, parse_config, to_ini
from .domain import DomainConfig, Grid, build_grid, check_geometric_condition
from .dynamics import propagate, propagate_adjoint, simulate
from .noise import NoiseModel, exact_increment_covariance

__all__ = [
    "ConfigError", "DomainConfig", "ExperimentConfig", "Grid", "NoiseModel", "OperatorSet", "PhysParams",
    "assemble", "build_grid", "check_geometric_condition", "energy", "exact_increment_covariance",
    "load_config", "parse_config", "propagate", "propagate_adjoint", "simulate", "to_ini",
]
