"""Source identification for a stochastic parabolic equation from terminal-time ensembles.

Stage 1 recovers the spatial source by conjugate gradients on a weighted
Tikhonov functional with adjoint gradients; Stage 2 refines the estimate by
random sampling and fits a per-node Gaussian posterior width.
"""

from .adjoint import GradientReport, adjoint_source, fd_gradient_check, functional, gradient, solve_adjoint
from .cgm import CgmConfig, CgmTrace, default_gamma, linearized_forward, run_cgm, step_length
from .errors import (
    AliasingError,
    DegenerateDirectionError,
    DependencyError,
    DivergenceError,
    InvalidConfigurationError,
    InvalidModelError,
    NumericalFailureError,
    ShapeError,
    StochSourceError,
    UnsupportedOracleError,
)
from .experiments import RunConfig, build_model, cmd_invert, cmd_rate_study, cmd_reproduce, cmd_simulate, cmd_uq
from .forward import (
    EllipticOperator,
    ExponentialFactor,
    ModelSpec,
    SpaceTimeField,
    assemble_operator,
    covariance_spectral,
    expectation_variance_spectral,
    forward_terminal,
    regularity_bound_check,
    simulate_path,
    simulate_paths,
    solve_deterministic,
)
from .grid import EigenSystem, Grid, TimeMesh, eigen_pairs, l2_inner, l2_norm, linf_norm, make_grid, project
from .observations import (
    ObservationEnsemble,
    PreparedData,
    expectation_data,
    generate_ensemble,
    inject_unknown_noise,
    load_ensemble,
    mean_error_check,
    prepare_data,
    save_ensemble,
)
from .spectral import (
    SpectralForward,
    forward_map,
    rate_study,
    reconstruct_exact,
    regularized_solution,
    spectral_forward,
)
from .uq import PosteriorResult, UqConfig, data_loss, grad_H, loss_L, run_stage2
from .weighting import WeightSchedule, WeightState, exponent, iid_limit_check, weight_state, weights

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
