"""Particle methods for McKean-Vlasov SDEs with anticipated law dependence.

Forward simulation, the variational equation, the delayed adjoint BSDE and
projected-gradient control optimisation, all on a shared uniform grid with
common random numbers.
"""

from __future__ import annotations

from .adjoint import (
    AdjointSolution,
    DriverAssembly,
    assemble_control_adjoint,
    duality_check,
    inner_bsde_solve,
    solve_adjoint,
)
from .exceptions import (
    AnticipatingMVError,
    ConfigError,
    GridError,
    MaxIterationsReached,
    NonFiniteError,
    PicardDivergence,
    SampleCountMismatch,
    UnknownProblem,
)
from .forward import FixedPointReport, ParticleEnsemble, contraction_probe, picard_step, solve_forward, weighted_norm
from .measure import EmpiricalMeasure, StatisticFunctional, lions_derivative_statistic, statistic, wasserstein2
from .optimizer import (
    OptimalityReport,
    evaluate_cost,
    gateaux_gradient_check,
    hamiltonian,
    hamiltonian_u_gradient,
    optimize,
)
from .problems import Control, ProblemSpec, TimeGrid, builtin, validate
from .variational import VariationalEnsemble, difference_quotient_check, solve_variational

__version__ = "0.1.0"

__all__ = [
    "AdjointSolution", "AnticipatingMVError", "ConfigError", "Control", "DriverAssembly",
    "EmpiricalMeasure", "FixedPointReport", "GridError", "MaxIterationsReached", "NonFiniteError",
    "OptimalityReport", "ParticleEnsemble", "PicardDivergence", "ProblemSpec", "SampleCountMismatch",
    "StatisticFunctional", "TimeGrid", "UnknownProblem", "VariationalEnsemble",
    "assemble_control_adjoint", "builtin", "contraction_probe", "difference_quotient_check",
    "duality_check", "evaluate_cost", "gateaux_gradient_check", "hamiltonian", "hamiltonian_u_gradient",
    "inner_bsde_solve", "lions_derivative_statistic", "optimize", "picard_step", "solve_adjoint",
    "solve_forward", "solve_variational", "statistic", "validate", "wasserstein2", "weighted_norm",
]
