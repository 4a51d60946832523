"""Upper bounds and oracles for E[log(1 + exp(X))] with X ~ N(theta, tau^2).

The centerpiece is a truncated alternating series ``eta``: two closed-form
leading terms plus ``2l - 1`` correction terms, each a pair of exp * Phi
products evaluated in log space.  Even partial sums bound the expectation
from below, odd ones from above, so ``eta`` (an odd partial sum) is always
an upper bound and tightens monotonically as ``l`` grows.

Also provided: the classical quadratic (Jaakkola-Jordan style) expected
bound with its optimal variational scale, analytic gradients of ``eta``,
and two independent ground-truth oracles (Gauss-Hermite quadrature and
seeded Monte Carlo).

Scalar operations take a :class:`GaussianMoment`; the ``*_values`` variants
operate on arrays of moments at once and are what the model-fitting modules
call in their hot loops.

Reproducibility: all Monte Carlo draws come from ``numpy.random.default_rng``
(PCG64).  The seed-to-stream mapping is NumPy's, which is stable across
releases for a fixed bit generator.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import log_ndtr, ndtr, roots_hermite

from .specfun import softplus

__all__ = [
    "GaussianMoment",
    "GaussianMoments",
    "BoundGradient",
    "DEFAULT_TRUNCATION",
    "term_a_k",
    "partial_sum",
    "eta",
    "eta_gradient",
    "jj_expected_bound",
    "jj_optimal_t",
    "jj_slope",
    "mc_expectation",
    "quad_expectation",
    "series_terms",
    "partial_sum_values",
    "eta_values",
    "eta_gradient_values",
    "jj_expected_bound_values",
    "gauss_hermite_nodes",
]

SQRT_2PI = math.sqrt(2.0 * math.pi)
_INV_SQRT_2PI = 1.0 / SQRT_2PI

# exp() arguments below this are flushed: the results (< 1e-304) vanish in
# every partial sum, and the clamp keeps exp() off the subnormal slow path
# so each series term costs the same
_EXP_FLOOR = -700.0

#: truncation used throughout the experiments; keeps the relative error of
#: the bound below 1% over the grids exercised by the tests
DEFAULT_TRUNCATION = 12


@dataclass(frozen=True)
class GaussianMoment:
    """Mean and standard deviation of a scalar Gaussian.

    ``tau`` must be strictly positive: the series involves theta/tau, so
    callers with degenerate variance are expected to clamp tau >= 1e-8
    rather than pass 0.
    """

    theta: float
    tau: float

    def __post_init__(self):
        if not (math.isfinite(self.theta) and math.isfinite(self.tau)):
            raise ValueError("GaussianMoment requires finite theta and tau")
        if self.tau <= 0.0:
            raise ValueError(f"tau must be > 0, got {self.tau!r}")


@dataclass(frozen=True)
class GaussianMoments:
    """A vector of scalar Gaussian moments in struct-of-arrays form."""

    theta: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=np.float64))
        object.__setattr__(self, "tau", np.asarray(self.tau, dtype=np.float64))
        if self.theta.shape != self.tau.shape:
            raise ValueError("theta and tau must have matching shapes")
        if np.any(self.tau <= 0.0):
            raise ValueError("all tau entries must be > 0")

    def __len__(self):
        return self.theta.shape[0]


class BoundGradient(NamedTuple):
    d_theta: float
    d_tau: float


def _check_truncation(l):
    if int(l) != l or l < 1:
        raise ValueError(f"truncation order must be an integer >= 1, got {l!r}")
    return int(l)


# ---------------------------------------------------------------------------
# vectorized kernels
# ---------------------------------------------------------------------------

def series_terms(theta, tau, n_terms):
    """Absolute series terms a_1..a_{n_terms}, shape (n_terms,) + theta.shape.

    a_k = (1/k) * [exp(k*theta + k^2 tau^2 / 2) * Phi(-theta/tau - k*tau)
                   + exp(-k*theta + k^2 tau^2 / 2) * Phi(theta/tau - k*tau)]

    Each product is formed as exp(log-sum), which keeps every term finite:
    the cdf factor decays faster than the exp factor grows.
    """
    theta = np.asarray(theta, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    z = theta / tau
    out = np.empty((n_terms,) + theta.shape, dtype=np.float64)
    for k in range(1, n_terms + 1):
        c = 0.5 * (k * k) * tau * tau
        e1 = np.exp(np.maximum(k * theta + c + log_ndtr(-z - k * tau), _EXP_FLOOR))
        e2 = np.exp(np.maximum(-k * theta + c + log_ndtr(z - k * tau), _EXP_FLOOR))
        out[k - 1] = (e1 + e2) / k
    return out


def _leading_terms(theta, tau):
    z = theta / tau
    return tau * _INV_SQRT_2PI * np.exp(-0.5 * z * z) + theta * ndtr(z)


def partial_sum_values(theta, tau, n_terms):
    """Partial sum S_K of the alternating series with K = n_terms."""
    theta = np.asarray(theta, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    acc = np.asarray(_leading_terms(theta, tau), dtype=np.float64)
    z = theta / tau
    for k in range(1, n_terms + 1):
        sgn = 1.0 if k % 2 == 1 else -1.0
        c = 0.5 * (k * k) * tau * tau
        e1 = np.exp(np.maximum(k * theta + c + log_ndtr(-z - k * tau), _EXP_FLOOR))
        e2 = np.exp(np.maximum(-k * theta + c + log_ndtr(z - k * tau), _EXP_FLOOR))
        acc = acc + sgn * ((e1 + e2) / k)
    return acc


def eta_values(theta, tau, l=DEFAULT_TRUNCATION):
    """Series upper bound eta_l on E[softplus] for arrays of moments."""
    l = _check_truncation(l)
    return partial_sum_values(theta, tau, 2 * l - 1)


def eta_gradient_values(theta, tau, l=DEFAULT_TRUNCATION):
    """(eta, d eta/d theta, d eta/d tau) for arrays of moments.

    Term-wise differentiation collapses nicely: with E1, E2 the two exp*Phi
    factors of a_k, the exp * pdf pieces generated by the chain rule all
    reduce to phi(theta/tau), giving

        d a_k / d theta = E1 - E2
        d a_k / d tau   = k^2 tau a_k - 2 phi(theta/tau)

    while the leading terms contribute Phi(theta/tau) and phi(theta/tau).
    """
    l = _check_truncation(l)
    theta = np.asarray(theta, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    z = theta / tau
    phi_z = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    value = tau * phi_z + theta * ndtr(z)
    d_theta = np.asarray(ndtr(z), dtype=np.float64)
    d_tau = np.asarray(phi_z, dtype=np.float64)
    for k in range(1, 2 * l):
        sgn = 1.0 if k % 2 == 1 else -1.0
        c = 0.5 * (k * k) * tau * tau
        e1 = np.exp(np.maximum(k * theta + c + log_ndtr(-z - k * tau), _EXP_FLOOR))
        e2 = np.exp(np.maximum(-k * theta + c + log_ndtr(z - k * tau), _EXP_FLOOR))
        a_k = (e1 + e2) / k
        value = value + sgn * a_k
        d_theta = d_theta + sgn * (e1 - e2)
        d_tau = d_tau + sgn * ((k * k) * tau * a_k - 2.0 * phi_z)
    return value, d_theta, d_tau


def _jj_slope_values(t):
    """a(t) = (sigmoid(t) - 1/2) / t with the quadratic-limit value at 0."""
    t = np.asarray(t, dtype=np.float64)
    small = np.abs(t) < 1e-4
    safe = np.where(small, 1.0, t)
    # sigmoid(t) - 0.5 == 0.5 * tanh(t / 2); the Taylor branch avoids 0/0
    return np.where(small, 0.25 - t * t / 48.0, 0.5 * np.tanh(0.5 * t) / safe)


def jj_expected_bound_values(theta, tau, t):
    """Gaussian expectation of the quadratic bound, vectorized."""
    theta = np.asarray(theta, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    a_t = _jj_slope_values(t)
    return (
        softplus(-t)
        + 0.5 * (theta + t)
        + 0.5 * a_t * (theta * theta + tau * tau - t * t)
    )


# ---------------------------------------------------------------------------
# scalar API
# ---------------------------------------------------------------------------

def term_a_k(m: GaussianMoment, k: int) -> float:
    """Absolute value of the k-th series term; strictly positive and finite."""
    if int(k) != k or k < 1:
        raise ValueError(f"k must be an integer >= 1, got {k!r}")
    return float(series_terms(m.theta, m.tau, int(k))[-1])


def partial_sum(m: GaussianMoment, n_terms: int) -> float:
    """Partial sum S_K; even K bounds E[softplus] below, odd K above."""
    if int(n_terms) != n_terms or n_terms < 0:
        raise ValueError(f"n_terms must be an integer >= 0, got {n_terms!r}")
    return float(partial_sum_values(m.theta, m.tau, int(n_terms)))


def eta(m: GaussianMoment, l: int = DEFAULT_TRUNCATION) -> float:
    """Series upper bound on E[softplus(X)], X ~ N(theta, tau^2).

    Equals the odd partial sum S_{2l-1}; satisfies the exact identity
    eta(theta, tau) - eta(-theta, tau) = theta.
    """
    return float(eta_values(m.theta, m.tau, l))


def eta_gradient(m: GaussianMoment, l: int = DEFAULT_TRUNCATION) -> BoundGradient:
    """Analytic (d eta/d theta, d eta/d tau), validated against differences."""
    _, d_th, d_ta = eta_gradient_values(m.theta, m.tau, l)
    return BoundGradient(float(d_th), float(d_ta))


def jj_slope(t: float) -> float:
    """Curvature coefficient a(t) of the quadratic bound; a(0) = 1/4."""
    return float(_jj_slope_values(t))


def jj_expected_bound(m: GaussianMoment, t: float) -> float:
    """Expectation of the quadratic upper bound at variational scale t.

    Upper-bounds E[softplus(X)] for every t; minimized over t at
    ``jj_optimal_t``.
    """
    return float(jj_expected_bound_values(m.theta, m.tau, t))


def jj_optimal_t(m: GaussianMoment) -> float:
    """Optimal scale sqrt(theta^2 + tau^2) = sqrt(E[X^2])."""
    return float(np.hypot(m.theta, m.tau))


def mc_expectation(m: GaussianMoment, n_samples: int, seed: int):
    """Seeded Monte Carlo estimate of E[softplus(X)].

    Returns ``(mean, std_error)``.  Draws X_j = theta + tau * z_j with z_j
    standard normal from ``default_rng(seed)``; the same seed always yields
    the same output.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    rng = np.random.default_rng(seed)
    x = m.theta + m.tau * rng.standard_normal(int(n_samples))
    vals = softplus(x)
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n_samples))
    return mean, se


def gauss_hermite_nodes(n_nodes: int):
    """Gauss-Hermite nodes and probabilists' weights for N(0, 1) averages.

    Returns ``(x, w)`` such that E[g(Z)] ~= sum_i w_i g(x_i) for Z standard
    normal.  Uses ``scipy.special.roots_hermite``, which is stable for
    large orders.
    """
    u, w = roots_hermite(int(n_nodes))
    return math.sqrt(2.0) * u, w / math.sqrt(math.pi)


def quad_expectation(m: GaussianMoment, n_nodes: int = 200) -> float:
    """Gauss-Hermite ground truth for E[softplus(X)].

    Convergence is spectral in ``n_nodes``; 200 nodes give at worst ~2e-9
    relative error at tau = 5 and better than 1e-10 for tau <= 4 over
    theta in [-10, 10], far below anything the tests compare against.
    """
    if n_nodes < 2:
        raise ValueError("n_nodes must be >= 2")
    x, w = gauss_hermite_nodes(n_nodes)
    return float(w @ softplus(m.theta + m.tau * x))
