"""nlmebic: nonlinear mixed-effects fitting with hybrid-penalty BIC selection.

Fits hierarchical two-stage models by maximum likelihood (Laplace / adaptive
Gauss-Hermite), computes the BIC family with hybrid log N / log n_tot
penalties, performs joint stepwise selection of covariates and random-effects
covariance structure, and ships a simulator plus Monte Carlo harness for
selection-frequency studies.
"""

__version__ = "0.1.0"

from .data import (
    CovariancePattern,
    CovariateMap,
    Dataset,
    ModelSpec,
    Subject,
    ThetaDims,
    count_vec_omega,
    load_dataset_csv,
    load_model_doc,
    parse_model_doc,
    theta_dims,
    validate_pattern,
    write_dataset_csv,
)
from .errors import (
    DegenerateEigenvaluesError,
    DomainError,
    GridTooLargeError,
    InnerNonConvergenceError,
    InputError,
    MaxIterationsError,
    NlmeError,
    NonFiniteLikelihoodError,
    NonFiniteObjectiveError,
    NonPositiveVarianceError,
    OffdiagWithoutDiagError,
    PatternNotParametrizableError,
    TooManyStructuresError,
)
from .estimation import (
    FitOptions,
    FitResult,
    default_init,
    fit_ml,
    standard_errors,
    wald_p_value,
)
from .likelihood import (
    EBResult,
    LikelihoodEvaluator,
    conditional_loglik,
    eb_mode,
    marginal_gradient,
    marginal_loglik_agq,
    marginal_loglik_laplace,
)
from .models import (
    ErrorModelSpec,
    StructuralModel,
    error_sd,
    get_model,
    onecpt_infusion,
    onecpt_oral,
    register_model,
    registered_models,
    twocpt_infusion,
)
from .params import (
    ThetaVector,
    initial_theta_from_doc,
    pack,
    theta_from_components,
    unpack,
)
from .selection import (
    CRITERIA,
    CriterionValue,
    SelectionTrace,
    StepwiseOptions,
    covariate_moves,
    criterion,
    enumerate_cov_structures,
    refine_correlations,
    stepwise_select,
)
from .simulate import (
    McConfig,
    McResult,
    SimDesign,
    mc_selection_study,
    simulate_dataset,
)

__all__ = [name for name in dir() if not name.startswith("_")]
