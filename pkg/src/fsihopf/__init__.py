"""Numerical toolkit for a spring-mounted rigid body in a viscous stream.

Modules: model, discretization, steady, evolution, spectral, periodic,
bifurcation, cli.
"""

__version__ = "0.1.0"

from .model import Params, PhysicalInputs, nondimensionalize, validate, ValidationError, SolverError  # noqa: F401
