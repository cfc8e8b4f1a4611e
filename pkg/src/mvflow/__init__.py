"""Monte Carlo sensitivities, densities and PDE checks for McKean-Vlasov SDEs."""

from .coefficients import (
    BUILTIN_FAMILIES,
    CoefficientModel,
    build_model,
    check_ellipticity,
    constant,
    eval_all,
    geometric,
    kernel_attraction,
    mean_attraction,
    mean_field_ou,
    sine_diffusion,
)
from .errors import (
    BlowUpError,
    ClassMismatchError,
    ConfigError,
    DegenerateGridError,
    DimensionError,
    MissingAuxiliaryPathError,
    MissingFieldError,
    ModelEvaluationError,
    MVFlowError,
    OrderExceededError,
    SingularJacobianError,
)
from .estimators import (
    DensityResult,
    EstimatorResult,
    PayoffSpec,
    PDEResidual,
    SensitivityEstimator,
    compare_fd,
    estimate_density,
    estimate_derivative_of_payoff,
    estimate_dmu,
    estimate_dx,
    estimate_dx_fixed_point,
    estimate_expectation,
    estimate_U_and_derivatives,
    make_payoff,
    nondifferentiability_probe,
    pde_residual,
)
from .measures import EmpiricalMeasure, wasserstein2_1d
from .oracles import gaussian_oracle, mf_ou_oracle
from .simulator import BrownianDriver, TimeGrid, simulate_decoupled, simulate_fixed_point, simulate_particles
from .weights import WeightBuilder, make_recipe

__version__ = "0.1.0"
