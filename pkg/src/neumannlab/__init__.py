"""Numerical laboratory for reflected diffusions in convex domains and
the parabolic / ergodic equations they represent.

Forward side: reflected, penalized, and free Euler schemes with keyed
counter-based noise (sde). Backward side: regression solvers for
semilinear equations with Neumann boundary conditions (bsde), two
routes to the ergodic pair (lambda, v) (ebsde), large-time asymptotics
u(T, x) ~ lambda T + v(x) + L with rate fitting (asymptotics), and
ergodic control over finite control sets (control). Everything is
cross-checked against an independent Crank-Nicolson oracle
(pde_oracle). The config/runner/bench layers make runs reproducible
byte for byte from (config, seed).
"""

from .asymptotics import (AsymptoticsReport, LambdaSweep, fit_limit_and_rate,
                          lambda_sweep, renormalized_profile)
from .bsde import (DirectEstimate, NeumannProblem, SolverConfig,
                   direct_estimator, evaluate_u, solve_finite_horizon)
from .config import RunConfig, build_problem, dump_config, load_config
from .control import (ConstantPolicy, ControlProblem, GradientFeedbackPolicy,
                      argmin_selector, ergodic_cost, finite_cost, hamiltonian,
                      hamiltonian_problem, verify_expansion)
from .ebsde import (ErgodicSolution, consistency_flag, helmholtz_lift,
                    solve_discounted, solve_ergodic)
from .errors import NumericalFailure, PreconditionError
from .fields import Driver, ScalarField, driver, scalar_field
from .geometry import (BallDomain, ConvexDomain, EllipsoidDomain,
                       IntervalDomain, make_domain)
from .pde_oracle import (flow_composition_check, solve_ergodic_fd,
                         solve_parabolic_fd)
from .rng import NoiseSource, derive_key
from .runner import emit_report, run_experiment
from .sde import (SdeCoefficients, coupling_gap, moment_estimate,
                  simulate_free, simulate_penalized, simulate_reflected)

__version__ = "0.1.0"

__all__ = [
    "AsymptoticsReport", "LambdaSweep", "fit_limit_and_rate",
    "lambda_sweep", "renormalized_profile",
    "DirectEstimate", "NeumannProblem", "SolverConfig",
    "direct_estimator", "evaluate_u", "solve_finite_horizon",
    "RunConfig", "build_problem", "dump_config", "load_config",
    "ConstantPolicy", "ControlProblem", "GradientFeedbackPolicy",
    "argmin_selector", "ergodic_cost", "finite_cost", "hamiltonian",
    "hamiltonian_problem", "verify_expansion",
    "ErgodicSolution", "consistency_flag", "helmholtz_lift",
    "solve_discounted", "solve_ergodic",
    "NumericalFailure", "PreconditionError",
    "Driver", "ScalarField", "driver", "scalar_field",
    "BallDomain", "ConvexDomain", "EllipsoidDomain", "IntervalDomain",
    "make_domain",
    "flow_composition_check", "solve_ergodic_fd", "solve_parabolic_fd",
    "NoiseSource", "derive_key",
    "emit_report", "run_experiment",
    "SdeCoefficients", "coupling_gap", "moment_estimate",
    "simulate_free", "simulate_penalized", "simulate_reflected",
    "__version__",
]
