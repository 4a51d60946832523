"""Variational Bayesian logistic regression.

Three fitting routines share one Gaussian variational family and one
stopping rule (relative change of the objective below ``rel_tol``):

* ``fit_viper`` - gradient ascent on the tractable objective obtained by
  replacing each intractable softplus expectation with the series bound
  ``eta`` (per-observation moments theta_i = x_i' mu, tau_i^2 = x_i' Sigma x_i).
* ``fit_vipg``  - coordinate ascent on the quadratic-bound objective, the
  classical closed-form scheme with one variational scale t_i per
  observation.
* ``fit_vimc``  - Adam on a reparameterized Monte Carlo estimate of the
  ELBO with fresh draws each iteration; stopping is applied to an
  exponentially smoothed trace because the raw objective is noisy.

The variational covariance is parameterized through its Cholesky factor
(diagonal entries kept positive via a log transform), so every iterate is a
valid Gaussian.
"""

import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from ._optim import adam_ascend, ascend, relative_change
from .bound import (
    DEFAULT_TRUNCATION,
    GaussianMoments,
    _jj_slope_values,
    eta_gradient_values,
    eta_values,
    gauss_hermite_nodes,
    jj_expected_bound_values,
)
from .specfun import sigmoid, softplus

__all__ = [
    "GaussianPrior",
    "VariationalGaussian",
    "LabeledDataset",
    "FitConfig",
    "FitResult",
    "TAU_FLOOR",
    "standard_prior",
    "gaussian_kl",
    "local_moments",
    "elbo_bound",
    "elbo_mc",
    "fit_viper",
    "fit_vipg",
    "fit_vimc",
    "pg_cavi_step",
    "predict_proba",
]

#: smallest marginal standard deviation ever passed to the bound
TAU_FLOOR = 1e-8

_PREDICT_NODES = 64


@dataclass(frozen=True)
class GaussianPrior:
    """Gaussian prior N(m, S) on the coefficient vector."""

    m: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m", np.asarray(self.m, dtype=np.float64))
        object.__setattr__(self, "S", np.asarray(self.S, dtype=np.float64))
        p = self.m.shape[0]
        if self.S.shape != (p, p):
            raise ValueError("prior covariance shape does not match mean")


def standard_prior(p: int) -> GaussianPrior:
    """The default N(0, I_p) prior."""
    return GaussianPrior(np.zeros(p), np.eye(p))


@dataclass(frozen=True)
class VariationalGaussian:
    """Gaussian N(mu, L L') with lower-triangular scale L.

    ``family`` is "full" or "mean_field"; mean-field scales are diagonal.
    """

    mu: np.ndarray
    scale: np.ndarray
    family: str = "full"

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64))
        d = self.mu.shape[0]
        if self.scale.shape != (d, d):
            raise ValueError("scale shape does not match mean")
        if not np.allclose(self.scale, np.tril(self.scale)):
            raise ValueError("scale must be lower triangular")
        if np.any(np.diag(self.scale) <= 0.0):
            raise ValueError("scale diagonal must be strictly positive")
        if self.family not in ("full", "mean_field"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == "mean_field" and np.any(np.tril(self.scale, -1) != 0.0):
            raise ValueError("mean_field scale must be diagonal")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def cov(self) -> np.ndarray:
        return self.scale @ self.scale.T


@dataclass(frozen=True)
class LabeledDataset:
    """Design matrix, binary responses and (optionally) true latent values."""

    X: np.ndarray
    y: np.ndarray
    f0: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "X", np.asarray(self.X, dtype=np.float64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.float64))
        if self.X.ndim != 2:
            raise ValueError("X must be a 2-d array")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError("y length does not match X")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("X contains non-finite values")
        if not np.all((self.y == 0.0) | (self.y == 1.0)):
            raise ValueError("y entries must be exactly 0 or 1")
        if self.f0 is not None:
            f0 = np.asarray(self.f0, dtype=np.float64)
            if f0.shape != self.y.shape:
                raise ValueError("f0 length does not match y")
            object.__setattr__(self, "f0", f0)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class FitConfig:
    """Knobs shared by the fitting routines.

    ``mc_samples`` is only used by the Monte Carlo fit.  ``family`` selects
    the variational family ("full" or "mean_field").
    """

    l: int = DEFAULT_TRUNCATION
    step_size: float = 0.05
    max_iters: int = 2000
    rel_tol: float = 1e-7
    mc_samples: int = 1000
    seed: int = 0
    family: str = "full"

    def __post_init__(self):
        if self.l < 1:
            raise ValueError("truncation order must be >= 1")
        if self.step_size <= 0.0:
            raise ValueError("step_size must be > 0")
        if not (1e-10 <= self.rel_tol <= 1e-2):
            raise ValueError("rel_tol must lie in [1e-10, 1e-2]")
        if self.mc_samples < 2:
            raise ValueError("mc_samples must be >= 2")
        if self.family not in ("full", "mean_field"):
            raise ValueError(f"unknown family {self.family!r}")


@dataclass(frozen=True)
class FitResult:
    posterior: VariationalGaussian
    elbo_trace: np.ndarray
    iterations: int
    converged: bool
    wall_time: float

    def __post_init__(self):
        if self.iterations != len(self.elbo_trace):
            raise ValueError("iterations must equal the trace length")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

class _PriorOps:
    """Cholesky-based prior quantities reused across iterations."""

    def __init__(self, prior: GaussianPrior):
        try:
            self.chol = cholesky(prior.S, lower=True)
        except np.linalg.LinAlgError as e:
            raise ValueError("prior covariance is not positive definite") from e
        self.m = prior.m
        self.logdet = 2.0 * float(np.log(np.diag(self.chol)).sum())
        eye = np.eye(prior.m.shape[0])
        inv_chol = solve_triangular(self.chol, eye, lower=True)
        self.S_inv = inv_chol.T @ inv_chol

    def kl_from(self, mu: np.ndarray, L: np.ndarray) -> float:
        p = mu.shape[0]
        logdet_q = 2.0 * float(np.log(np.diag(L)).sum())
        T = solve_triangular(self.chol, L, lower=True)
        delta = mu - self.m
        w = solve_triangular(self.chol, delta, lower=True)
        return 0.5 * (
            self.logdet - logdet_q - p + float((T * T).sum()) + float(w @ w)
        )


def gaussian_kl(q: VariationalGaussian, prior: GaussianPrior) -> float:
    """KL(q || prior) for Gaussians, via Cholesky factors.

    Nonnegative; zero exactly when the two distributions coincide.
    """
    if q.dim != prior.m.shape[0]:
        raise ValueError("dimension mismatch between q and prior")
    return _PriorOps(prior).kl_from(q.mu, q.scale)


def _moment_arrays(X: np.ndarray, mu: np.ndarray, L: np.ndarray):
    """theta_i = x_i' mu and clamped tau_i = ||L' x_i|| for all rows."""
    theta = X @ mu
    XL = X @ L
    tau_raw = np.sqrt(np.einsum("ij,ij->i", XL, XL))
    tau = np.maximum(tau_raw, TAU_FLOOR)
    return theta, tau, tau_raw


def local_moments(data: LabeledDataset, q: VariationalGaussian) -> GaussianMoments:
    """Per-observation marginal moments of x_i' beta under q.

    The standard deviation is computed through the scale factor (never by
    forming the covariance) and clamped below at ``TAU_FLOOR``.
    """
    if data.p != q.dim:
        raise ValueError("dimension mismatch between data and q")
    theta, tau, _ = _moment_arrays(data.X, q.mu, q.scale)
    return GaussianMoments(theta, tau)


def elbo_bound(
    data: LabeledDataset,
    q: VariationalGaussian,
    prior: GaussianPrior,
    l: int = DEFAULT_TRUNCATION,
) -> float:
    """Tractable ELBO surrogate: sum_i (y_i theta_i - eta_l(theta_i, tau_i)) - KL."""
    theta, tau, _ = _moment_arrays(data.X, q.mu, q.scale)
    lik = float(data.y @ theta - eta_values(theta, tau, l).sum())
    return lik - gaussian_kl(q, prior)


def elbo_mc(
    data: LabeledDataset,
    q: VariationalGaussian,
    prior: GaussianPrior,
    n_samples: int = 10000,
    seed: int = 0,
):
    """Monte Carlo ELBO estimate and its standard error.

    Draws beta = mu + L z by reparameterization, averages the per-sample
    log-likelihood totals, and subtracts the exact Gaussian KL.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((int(n_samples), q.dim))
    B = q.mu + z @ q.scale.T
    E = data.X @ B.T
    ll = data.y @ E - softplus(E).sum(axis=0)
    kl = gaussian_kl(q, prior)
    mean = float(ll.mean()) - kl
    se = float(ll.std(ddof=1) / math.sqrt(n_samples))
    return mean, se


def predict_proba(q: VariationalGaussian, X: np.ndarray) -> np.ndarray:
    """Posterior predictive P(y=1 | x) = E_q[sigmoid(x' beta)].

    Computed by Gauss-Hermite quadrature over the scalar marginal of
    x' beta, which is deterministic and accurate to quadrature precision.
    """
    X = np.asarray(X, dtype=np.float64)
    theta, tau, _ = _moment_arrays(X, q.mu, q.scale)
    nodes, weights = gauss_hermite_nodes(_PREDICT_NODES)
    return sigmoid(theta[:, None] + tau[:, None] * nodes[None, :]) @ weights


# ---------------------------------------------------------------------------
# parameter packing for the gradient-based fits
# ---------------------------------------------------------------------------

class _QPacking:
    """Flat vector <-> (mu, L); the diagonal of L is stored in log scale."""

    def __init__(self, p: int, family: str):
        self.p = p
        self.family = family
        self.i_lower = np.tril_indices(p, -1)
        self.n_lower = p * (p - 1) // 2 if family == "full" else 0

    def flatten(self, mu, L):
        parts = [mu, np.log(np.diag(L))]
        if self.family == "full":
            parts.append(L[self.i_lower])
        return np.concatenate(parts)

    def unflatten(self, v):
        p = self.p
        mu = v[:p]
        L = np.zeros((p, p))
        L[np.diag_indices(p)] = np.exp(v[p : 2 * p])
        if self.family == "full":
            L[self.i_lower] = v[2 * p :]
        return mu, L

    def flatten_grad(self, g_mu, g_L, L):
        parts = [g_mu, np.diag(g_L) * np.diag(L)]
        if self.family == "full":
            parts.append(g_L[self.i_lower])
        return np.concatenate(parts)


def _init_params(p: int, seed: int, family: str):
    rng = np.random.default_rng(seed)
    mu0 = rng.standard_normal(p)
    L0 = math.sqrt(0.35) * np.eye(p)
    return mu0, L0, rng


def _fit_result(pack, x, trace, converged, family, t_start):
    mu, L = pack.unflatten(x)
    posterior = VariationalGaussian(mu, L, family)
    return FitResult(
        posterior=posterior,
        elbo_trace=np.asarray(trace, dtype=np.float64),
        iterations=len(trace),
        converged=converged,
        wall_time=time.perf_counter() - t_start,
    )


# ---------------------------------------------------------------------------
# fits
# ---------------------------------------------------------------------------

def fit_viper(data: LabeledDataset, prior: GaussianPrior, config: FitConfig) -> FitResult:
    """Maximize the series-bound objective by line-searched gradient ascent.

    The mean is initialized from a seeded standard normal and the
    covariance at 0.35 I; the objective trace is nondecreasing because a
    step is only accepted when it does not decrease the objective.
    """
    t_start = time.perf_counter()
    p = data.p
    ops = _PriorOps(prior)
    pack = _QPacking(p, config.family)
    mu0, L0, _ = _init_params(p, config.seed, config.family)
    X, y, l = data.X, data.y, config.l

    def value(v):
        mu, L = pack.unflatten(v)
        theta, tau, _ = _moment_arrays(X, mu, L)
        return float(y @ theta - eta_values(theta, tau, l).sum()) - ops.kl_from(mu, L)

    def grad(v):
        mu, L = pack.unflatten(v)
        theta, tau, tau_raw = _moment_arrays(X, mu, L)
        _, g_th, g_ta = eta_gradient_values(theta, tau, l)
        g_mu = X.T @ (y - g_th) - ops.S_inv @ (mu - ops.m)
        w = np.where(tau_raw > TAU_FLOOR, g_ta / tau, 0.0)
        G = X.T @ (X * w[:, None])
        g_L = -G @ L - ops.S_inv @ L + np.diag(1.0 / np.diag(L))
        return pack.flatten_grad(g_mu, np.tril(g_L), L)

    res = ascend(value, grad, pack.flatten(mu0, L0), config.step_size,
                 config.max_iters, config.rel_tol)
    return _fit_result(pack, res.x, res.trace, res.converged, config.family, t_start)


def pg_cavi_step(X, y, prior: GaussianPrior, t, family: str = "full", mu0=None):
    """One coordinate-ascent cycle of the quadratic-bound scheme.

    Given per-observation scales ``t``, returns the updated ``(mu, Sigma,
    t_new)``:

        Sigma <- (S^-1 + sum_i a(t_i) x_i x_i')^-1
        mu    <- Sigma (S^-1 m + sum_i (y_i - 1/2) x_i)
        t_i   <- sqrt(x_i' (Sigma + mu mu') x_i)

    These are the stationarity conditions of the expected quadratic-bound
    objective for fixed t (a(t) here is twice the classical curvature
    coefficient, hence no extra factor of 2 on the precision).  For the
    mean-field family only the diagonal precision is inverted and the mean
    is refreshed by one Gauss-Seidel pass of exact coordinate
    maximizations, starting from ``mu0`` (the prior mean when omitted).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ops = _PriorOps(prior)
    a = _jj_slope_values(np.asarray(t, dtype=np.float64))
    A = ops.S_inv + X.T @ (X * a[:, None])
    b = ops.S_inv @ ops.m + X.T @ (y - 0.5)
    if family == "full":
        try:
            cA = cholesky(A, lower=True)
        except np.linalg.LinAlgError as e:
            raise RuntimeError("singular quadratic-bound update matrix") from e
        inv_cA = solve_triangular(cA, np.eye(A.shape[0]), lower=True)
        Sigma = inv_cA.T @ inv_cA
        mu = Sigma @ b
    else:
        diag_A = np.diag(A)
        if np.any(diag_A <= 0.0):
            raise RuntimeError("singular quadratic-bound update matrix")
        mu = (ops.m if mu0 is None else np.asarray(mu0, dtype=np.float64)).copy()
        for j in range(A.shape[0]):
            mu[j] = (b[j] - A[j] @ mu + diag_A[j] * mu[j]) / diag_A[j]
        Sigma = np.diag(1.0 / diag_A)
    theta = X @ mu
    tau2 = np.einsum("ij,jk,ik->i", X, Sigma, X)
    t_new = np.sqrt(theta * theta + np.maximum(tau2, 0.0))
    return mu, Sigma, t_new


def fit_vipg(data: LabeledDataset, prior: GaussianPrior, config: FitConfig) -> FitResult:
    """Coordinate ascent on the quadratic-bound ELBO (closed-form updates)."""
    t_start = time.perf_counter()
    p = data.p
    ops = _PriorOps(prior)
    mu, L, _ = _init_params(p, config.seed, config.family)
    X, y = data.X, data.y

    theta, tau, _ = _moment_arrays(X, mu, L)
    t = np.sqrt(theta * theta + tau * tau)
    trace = []
    prev = None
    converged = False
    for _ in range(config.max_iters):
        mu, Sigma, t = pg_cavi_step(X, y, prior, t, config.family, mu0=mu)
        if config.family == "full":
            L = cholesky(Sigma, lower=True)
        else:
            L = np.diag(np.sqrt(np.diag(Sigma)))
        theta, tau, _ = _moment_arrays(X, mu, L)
        elbo = float(
            y @ theta - jj_expected_bound_values(theta, tau, t).sum()
        ) - ops.kl_from(mu, L)
        trace.append(elbo)
        if prev is not None and relative_change(elbo, prev) < config.rel_tol:
            converged = True
            break
        prev = elbo
    posterior = VariationalGaussian(mu, L, config.family)
    return FitResult(
        posterior=posterior,
        elbo_trace=np.asarray(trace, dtype=np.float64),
        iterations=len(trace),
        converged=converged,
        wall_time=time.perf_counter() - t_start,
    )


def fit_vimc(data: LabeledDataset, prior: GaussianPrior, config: FitConfig) -> FitResult:
    """Adam on the reparameterized Monte Carlo ELBO (fresh draws per step)."""
    t_start = time.perf_counter()
    p = data.p
    ops = _PriorOps(prior)
    pack = _QPacking(p, config.family)
    mu0, L0, rng = _init_params(p, config.seed, config.family)
    X, y, S = data.X, data.y, config.mc_samples

    def value_and_grad(v, _t):
        mu, L = pack.unflatten(v)
        z = rng.standard_normal((S, p))
        B = mu + z @ L.T
        E = X @ B.T
        ll = y @ E - softplus(E).sum(axis=0)
        value = float(ll.mean()) - ops.kl_from(mu, L)
        R = y[:, None] - sigmoid(E)
        g_mu = X.T @ R.mean(axis=1) - ops.S_inv @ (mu - ops.m)
        g_L = (X.T @ R) @ z / S - ops.S_inv @ L + np.diag(1.0 / np.diag(L))
        return value, pack.flatten_grad(g_mu, np.tril(g_L), L)

    res = adam_ascend(value_and_grad, pack.flatten(mu0, L0), config.step_size,
                      config.max_iters, config.rel_tol)
    return _fit_result(pack, res.x, res.trace, res.converged, config.family, t_start)
