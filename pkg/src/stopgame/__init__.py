"""Numerical toolkit for a stopper-controller game with absorption."""

__version__ = "0.1.0"

from .errors import (AssumptionViolation, ConfigurationError, ConsistencyError, DomainError,
                     NonConvergenceError, NumericalError, ParameterError, SimulationError,
                     StopGameError)
from .model import GameModel, RegimeFlags, builtin_model, theta, theta_bar, validate_assumptions
from .approx import PenalizationParams, assemble, compatibility_fix
from .hamiltonian import feedback_drift, hamiltonian, hamiltonian_eval, HamiltonianQuery
from .pde import Mesh, ScalarField, SolverOptions, solve_penalized, solve_penalized_unbounded
from .continuation import default_schedule, run_schedule, verify_variational_inequality
