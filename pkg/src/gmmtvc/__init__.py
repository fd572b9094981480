"""Growth mixture models with a trait/state-decomposed time-varying covariate."""

from .classification import accuracy, latent_kappa, posterior
from .dataio import LongitudinalDataset, read_dataset, standardize_tvc, write_dataset
from .estimation import (
    FitOptions,
    FitResult,
    GatingParameters,
    MixtureParameters,
    ModelSpec,
    enumerate_classes,
    fit,
    gating_probabilities,
    mixture_loglik,
    pack_parameters,
    select_k_by_bic,
    unpack_parameters,
)
from .forms import (
    BilinearSpline,
    FunctionalForm,
    JenssBayley,
    Linear,
    NegativeExponential,
    Occasions,
    Quadratic,
    RelativeRates,
    TvcDecomposition,
    TvcGrowthFactors,
    inverse_reparameterize_bilinear,
    make_form,
    outcome_loadings,
    reparameterize_bilinear,
    state_features,
    tvc_loadings,
)
from .moments import ClassParameters, ImpliedMoments, conditional_growth_moments, implied_moments, latent_design
from .simulation import (
    MetricsReport,
    MonteCarloOptions,
    SimulationCondition,
    coverage,
    empirical_se,
    generate_dataset,
    mc_se_of_bias,
    reference_condition,
    relative_bias,
    relative_rmse,
    run_condition,
    three_class_condition,
)

__version__ = "0.1.0"
