"""Effective dynamics for non-reversible diffusions, with error diagnostics."""

from .coupled import (
    CoupledRun,
    IntrinsicBrownian,
    PathErrorStats,
    error_stats,
    project_noise,
    simulate_coupled,
    simulate_coupled_random_clock,
    simulate_effective,
)
from .diagnostics import (
    DiagnosticsError,
    DiagnosticsReport,
    LevelSetGrid,
    coefficient_gap,
    diagnose,
    estimate_kappa_lambda,
    evaluate_bounds,
    level_set_gap,
    level_set_grid,
    poincare_constant,
    poincare_scan,
    solve_level_set_poisson,
)
from .effective import (
    ConditionalProfile,
    EffectiveModel,
    EstimationError,
    analytic_effective,
    effective_from_profile,
    estimate_conditional,
)
from .models import (
    CoarseMap,
    DomainSpec,
    MatrixField,
    ModelError,
    ScalarField,
    SdeModel,
    VectorField,
    build_model,
    geometry_at,
    registry,
    nr_gauss,
    torus_symplectic,
    two_scale,
    var_diff,
    verify_stationarity,
)
from .sampling import DivergenceError, brownian, euler_maruyama, sample_equilibrium

__version__ = "0.1.0"
