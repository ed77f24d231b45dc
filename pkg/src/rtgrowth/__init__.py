"""rtgrowth: variational growth rates and evolution tests for buoyancy-driven
instability of compressible viscous flow in a box."""

from .params import PhysParams
from .steady import (SteadyProfile, CoefficientPair, ProfileClass,
                     build_steady_state, classify_profile,
                     constant_energy_stable_spec)
from .grid import (BoxMesh, FESpace, QuadratureRule, build_mesh,
                   discrete_norms, interpolate)
from .forms import (AssembledForms, WeightedDivOps, assemble,
                    assemble_weighted_div, energy_quadrature, lame_solve,
                    LameSolver, quadratic_forms)
from .spectral import (AlphaCurve, GrowingMode, GrowthRateResult, SolverOpts,
                       alpha, estimate_poincare_c3, find_growth_rate,
                       incompressible_growth_rate, lower_bound_test_function,
                       reconstruct_mode, sample_alpha_curve)
from .evolve import (CompatibleData, EscapeTimeReport, LinearPropagator,
                     NonlinearIntegrator, PerturbationState, StabilityLedger,
                     Trajectory, build_compatible_data,
                     escape_time_experiment, fit_escape_slope, linear_step,
                     measure_growth_rate, mode_state, nonlinear_step,
                     state_diagnostics, total_perturbation_mass,
                     verify_stability_identity, zero_state)

__version__ = "0.1.0"

__all__ = [
    "PhysParams", "SteadyProfile", "CoefficientPair", "ProfileClass",
    "build_steady_state", "classify_profile", "constant_energy_stable_spec",
    "BoxMesh", "FESpace", "QuadratureRule", "build_mesh", "discrete_norms",
    "interpolate", "AssembledForms", "WeightedDivOps", "assemble",
    "assemble_weighted_div", "energy_quadrature", "lame_solve", "LameSolver",
    "quadratic_forms", "AlphaCurve", "GrowingMode", "GrowthRateResult",
    "SolverOpts", "alpha", "estimate_poincare_c3", "find_growth_rate",
    "incompressible_growth_rate", "lower_bound_test_function",
    "reconstruct_mode", "sample_alpha_curve", "CompatibleData",
    "EscapeTimeReport", "LinearPropagator", "NonlinearIntegrator",
    "PerturbationState", "StabilityLedger", "Trajectory",
    "build_compatible_data", "escape_time_experiment", "fit_escape_slope",
    "linear_step", "measure_growth_rate", "mode_state", "nonlinear_step",
    "state_diagnostics", "total_perturbation_mass",
    "verify_stability_identity", "zero_state",
]
