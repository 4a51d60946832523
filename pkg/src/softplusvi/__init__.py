"""Variational inference for logistic models via softplus-expectation bounds.

The library is organized around a tight truncated-series upper bound on
E[log(1 + exp(X))] for Gaussian X (module ``bound``), which turns the
intractable ELBO of Bayesian logistic regression (``vblogit``) and sparse
Gaussian-process classification (``vbgp``) into a tractable objective.
The classical quadratic bound and a Monte Carlo estimator are provided as
baselines throughout; ``metrics``, ``datagen`` and ``cli`` supply the
evaluation harness.
"""

__version__ = "0.1.0"

from .bound import (
    BoundGradient,
    DEFAULT_TRUNCATION,
    GaussianMoment,
    GaussianMoments,
    eta,
    eta_gradient,
    eta_values,
    jj_expected_bound,
    jj_optimal_t,
    mc_expectation,
    partial_sum,
    quad_expectation,
    term_a_k,
)
from .datagen import (
    GPToySpec,
    LogisticSimSpec,
    gen_gp_toy,
    gen_logistic,
    load_libsvm,
    save_libsvm,
    train_test_split,
)
from .metrics import (
    MetricsReport,
    auc,
    coverage_and_width,
    kl_mc_gaussians,
    kl_mc_marginals,
    mse_posterior_mean,
    quantile_summary,
)
from .specfun import (
    exp_times_cdf,
    log_std_normal_cdf,
    sigmoid,
    softplus,
    std_normal_cdf,
    std_normal_pdf,
)
from .vbgp import (
    KernelSpec,
    MeanFunction,
    SparseGPState,
    fit_vimc_gp,
    fit_vipg_gp,
    fit_viper_gp,
    gp_elbo_bound,
    gp_elbo_mc,
    gp_predict_proba,
    kernel_matrix,
    moments_from_natural,
    natural_from_moments,
    q_f_moments,
    variational_moments,
)
from .vblogit import (
    FitConfig,
    FitResult,
    GaussianPrior,
    LabeledDataset,
    VariationalGaussian,
    elbo_bound,
    elbo_mc,
    fit_vimc,
    fit_vipg,
    fit_viper,
    gaussian_kl,
    local_moments,
    pg_cavi_step,
    predict_proba,
    standard_prior,
)
