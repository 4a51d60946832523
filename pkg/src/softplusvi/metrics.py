"""Evaluation metrics computed uniformly across fitted posteriors.

KL divergences against the Monte Carlo reference posterior are reported in
both directions; downstream tables use the forward direction
KL(reference || method) by default.  For GP fits the comparison is between
the per-datum marginal moment vectors, treated as products of scalar
Gaussians (the full latent covariance is never materialized).
"""

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import ndtri
from scipy.stats import rankdata

from .bound import GaussianMoments
from .vblogit import VariationalGaussian

__all__ = [
    "MetricsReport",
    "kl_mc_gaussians",
    "kl_mc_marginals",
    "mse_posterior_mean",
    "coverage_and_width",
    "auc",
    "quantile_summary",
]

#: two-sided 95% standard normal quantile
Z_95 = 1.959963984540054

_SUMMARY_PROBS = (0.025, 0.5, 0.975)


@dataclass
class MetricsReport:
    """One run's worth of metrics for a single method."""

    elbo_mc: float
    elbo_mc_se: float
    kl_mc_fwd: Optional[float]
    kl_mc_rev: Optional[float]
    mse: Optional[float]
    coverage: Optional[float]
    ci_width: float
    auc: float
    iterations: int
    wall_time_s: float

    def __post_init__(self):
        for name in ("coverage", "auc"):
            value = getattr(self, name)
            if value is not None and not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
        for name in ("kl_mc_fwd", "kl_mc_rev"):
            value = getattr(self, name)
            if value is not None and value < 0.0:
                raise ValueError(f"{name} must be nonnegative, got {value!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _gaussian_kl_chol(mu1, L1, mu2, L2) -> float:
    """KL(N(mu1, L1 L1') || N(mu2, L2 L2')) from Cholesky factors."""
    d = mu1.shape[0]
    T = solve_triangular(L2, L1, lower=True)
    w = solve_triangular(L2, mu1 - mu2, lower=True)
    logdet1 = 2.0 * float(np.log(np.diag(L1)).sum())
    logdet2 = 2.0 * float(np.log(np.diag(L2)).sum())
    return 0.5 * (logdet2 - logdet1 - d + float((T * T).sum()) + float(w @ w))


def kl_mc_gaussians(q_ref: VariationalGaussian, q: VariationalGaussian):
    """(KL(q_ref || q), KL(q || q_ref)) in closed form."""
    if q_ref.dim != q.dim:
        raise ValueError("dimension mismatch between the two Gaussians")
    fwd = _gaussian_kl_chol(q_ref.mu, q_ref.scale, q.mu, q.scale)
    rev = _gaussian_kl_chol(q.mu, q.scale, q_ref.mu, q_ref.scale)
    return fwd, rev


def kl_mc_marginals(m_ref: GaussianMoments, m: GaussianMoments):
    """Both KL directions between products of scalar Gaussians."""
    if len(m_ref) != len(m):
        raise ValueError("moment vectors have different lengths")

    def one_way(a, b):
        ratio2 = (a.tau / b.tau) ** 2
        shift = (a.theta - b.theta) ** 2 / b.tau**2
        return float(0.5 * (ratio2 + shift - 1.0 - np.log(ratio2)).sum())

    return one_way(m_ref, m), one_way(m, m_ref)


def mse_posterior_mean(theta: np.ndarray, f0: np.ndarray) -> float:
    """Mean squared error between posterior means and true latent values."""
    theta = np.asarray(theta, dtype=np.float64)
    f0 = np.asarray(f0, dtype=np.float64)
    if theta.shape != f0.shape:
        raise ValueError("length mismatch between theta and f0")
    if theta.size == 0:
        raise ValueError("empty input")
    return float(np.mean((theta - f0) ** 2))


def coverage_and_width(moments: GaussianMoments, f0: np.ndarray, level: float = 0.95):
    """Fraction of f0 inside the marginal credible intervals, and mean width.

    Intervals are the equal-tailed Gaussian ones, theta_i +/- z * tau_i.
    """
    f0 = np.asarray(f0, dtype=np.float64)
    if f0.shape != moments.theta.shape:
        raise ValueError("length mismatch between moments and f0")
    if not (0.0 < level < 1.0):
        raise ValueError("level must lie in (0, 1)")
    z = float(ndtri(0.5 + level / 2.0))
    half = z * moments.tau
    inside = np.abs(f0 - moments.theta) <= half
    return float(inside.mean()), float(2.0 * half.mean())


def auc(y: np.ndarray, scores: np.ndarray) -> float:
    """ROC area via the rank (Mann-Whitney) formulation, ties half-credited."""
    y = np.asarray(y)
    scores = np.asarray(scores, dtype=np.float64)
    if y.shape != scores.shape:
        raise ValueError("length mismatch between y and scores")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present to compute the AUC")
    ranks = rankdata(scores)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def quantile_summary(values, probs=_SUMMARY_PROBS) -> np.ndarray:
    """Linear-interpolation quantiles (index = p * (n - 1)) of a sample."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty input")
    return np.quantile(values, probs)
