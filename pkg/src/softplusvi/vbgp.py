"""Sparse variational Gaussian-process classification.

The latent function is summarized by M inducing values u with variational
posterior q(u) = N(mu, Sigma).  The public state carries q(u) in natural
coordinates: nat1 = Sigma^-1 mu together with a lower-triangular factor F
of the precision (Sigma^-1 = F F', positive diagonal), which keeps the
precision positive definite by construction.

Per-datum marginals of the projected process

    q(f) = N(A mu, K_nn + A (Sigma - K_mm) A'),   A = K_nm K_mm^-1

feed the same three per-observation bounds as the logistic module (series
bound, quadratic bound, Monte Carlo).  The fits jointly optimize the
variational parameters, inducing locations, ARD kernel hyperparameters and
the linear mean function with a single learning rate.

Internally the optimizers work in prior-whitened coordinates, q(u) =
N(m(Z) + L_m mu_w, L_m Sigma_w L_m') with K_mm = L_m L_m', again with
Sigma_w^-1 = F_w F_w'.  Smooth kernels make K_mm nearly singular (its
spectrum decays below any jitter), so unwhitened natural parameters span
many orders of magnitude; whitening puts every coordinate on an O(1)
scale, and the Gaussian KL becomes the hyperparameter-free
KL(q_w || N(0, I)).  Gradients are fully analytic, including the
propagation through the Cholesky factor of K_mm, and are checked against
finite differences in the test suite.
"""

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from ._optim import adam_ascend, ascend
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
from .vblogit import FitConfig, FitResult, LabeledDataset, VariationalGaussian

__all__ = [
    "KernelSpec",
    "MeanFunction",
    "SparseGPState",
    "TAU2_FLOOR",
    "kernel_matrix",
    "natural_from_moments",
    "moments_from_natural",
    "variational_moments",
    "q_f_moments",
    "gp_elbo_bound",
    "gp_elbo_mc",
    "gp_predict_proba",
    "fit_viper_gp",
    "fit_vipg_gp",
    "fit_vimc_gp",
]

#: variance floor applied to the q(f) marginals before taking square roots
TAU2_FLOOR = 1e-10

_FIT_JITTER = 1e-6


@dataclass(frozen=True)
class KernelSpec:
    """ARD squared-exponential kernel hyperparameters."""

    lengthscales: np.ndarray
    signal_variance: float = 1.0
    jitter: float = 1e-6

    def __post_init__(self):
        ls = np.asarray(self.lengthscales, dtype=np.float64)
        object.__setattr__(self, "lengthscales", ls)
        if np.any(ls <= 0.0):
            raise ValueError("lengthscales must be positive")
        if self.signal_variance <= 0.0:
            raise ValueError("signal_variance must be positive")
        if self.jitter < 0.0:
            raise ValueError("jitter must be nonnegative")


@dataclass(frozen=True)
class MeanFunction:
    """Linear mean m(x) = x' weights + bias."""

    weights: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights + self.bias


@dataclass(frozen=True)
class SparseGPState:
    """Inducing locations plus natural variational parameters.

    ``nat2_factor`` is the lower-triangular F with Sigma^-1 = F F'; its
    diagonal must be strictly positive, which makes -Sigma^-1 / 2 negative
    definite structurally.
    """

    Z: np.ndarray
    nat1: np.ndarray
    nat2_factor: np.ndarray
    kernel: KernelSpec
    mean: MeanFunction

    def __post_init__(self):
        object.__setattr__(self, "Z", np.asarray(self.Z, dtype=np.float64))
        object.__setattr__(self, "nat1", np.asarray(self.nat1, dtype=np.float64))
        object.__setattr__(
            self, "nat2_factor", np.asarray(self.nat2_factor, dtype=np.float64)
        )
        M = self.Z.shape[0]
        if M < 1:
            raise ValueError("at least one inducing point is required")
        if self.nat1.shape != (M,) or self.nat2_factor.shape != (M, M):
            raise ValueError("natural parameter shapes do not match Z")
        if not np.allclose(self.nat2_factor, np.tril(self.nat2_factor)):
            raise ValueError("nat2_factor must be lower triangular")
        if np.any(np.diag(self.nat2_factor) <= 0.0):
            raise ValueError("nat2_factor diagonal must be strictly positive")

    @property
    def n_inducing(self) -> int:
        return self.Z.shape[0]


def kernel_matrix(spec: KernelSpec, A: np.ndarray, B: np.ndarray = None) -> np.ndarray:
    """ARD-RBF Gram matrix; ``B=None`` means K(A, A) plus jitter.

    Entries are signal_variance * exp(-0.5 * sum_d (a_d - b_d)^2 / ls_d^2).
    """
    A = np.asarray(A, dtype=np.float64)
    symmetric = B is None
    Bm = A if symmetric else np.asarray(B, dtype=np.float64)
    As = A / spec.lengthscales
    Bs = Bm / spec.lengthscales
    sq = (
        (As * As).sum(axis=1)[:, None]
        + (Bs * Bs).sum(axis=1)[None, :]
        - 2.0 * As @ Bs.T
    )
    K = spec.signal_variance * np.exp(-0.5 * np.maximum(sq, 0.0))
    if symmetric:
        K = 0.5 * (K + K.T)
        K[np.diag_indices_from(K)] = spec.signal_variance + spec.jitter
    return K


def natural_from_moments(mu: np.ndarray, Sigma: np.ndarray):
    """(nat1, F) with nat1 = Sigma^-1 mu and Sigma^-1 = F F'."""
    Sigma = np.asarray(Sigma, dtype=np.float64)
    cS = cholesky(Sigma, lower=True)
    inv_cS = solve_triangular(cS, np.eye(Sigma.shape[0]), lower=True)
    P = inv_cS.T @ inv_cS
    P = 0.5 * (P + P.T)
    F = cholesky(P, lower=True)
    return P @ np.asarray(mu, dtype=np.float64), F


def moments_from_natural(nat1: np.ndarray, F: np.ndarray):
    """(mu, Sigma) recovered from the natural parameterization."""
    F = np.asarray(F, dtype=np.float64)
    inv_F = solve_triangular(F, np.eye(F.shape[0]), lower=True)
    Sigma = inv_F.T @ inv_F
    Sigma = 0.5 * (Sigma + Sigma.T)
    return Sigma @ np.asarray(nat1, dtype=np.float64), Sigma


def variational_moments(state: SparseGPState):
    """Moment parameters (mu, Sigma) of q(u) for a state."""
    return moments_from_natural(state.nat1, state.nat2_factor)


def _chol_kmm(Kmm: np.ndarray) -> np.ndarray:
    try:
        return cholesky(Kmm, lower=True)
    except np.linalg.LinAlgError as e:
        pivot = float(np.linalg.eigvalsh(Kmm).min())
        raise np.linalg.LinAlgError(
            f"inducing kernel matrix is numerically singular despite jitter "
            f"(smallest pivot {pivot:.3e})"
        ) from e


# ---------------------------------------------------------------------------
# public per-datum projection (unwhitened state)
# ---------------------------------------------------------------------------

class _StateForward:
    """q(f) marginals and the Gaussian KL for a public state."""

    def __init__(self, state: SparseGPState, X: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        spec = state.kernel
        M = state.n_inducing
        self.Kmm = kernel_matrix(spec, state.Z)
        self.Knm = kernel_matrix(spec, X, state.Z)
        self.knn = np.full(X.shape[0], spec.signal_variance + spec.jitter)
        self.Lm = _chol_kmm(self.Kmm)
        inv_Lm = solve_triangular(self.Lm, np.eye(M), lower=True)
        self.Kmm_inv = inv_Lm.T @ inv_Lm
        self.mu, self.Sigma = moments_from_natural(state.nat1, state.nat2_factor)
        self.mZ = state.mean(state.Z)
        self.r = self.mu - self.mZ
        self.A = self.Knm @ self.Kmm_inv
        self.theta = state.mean(X) + self.A @ self.r
        tau2 = self.knn + np.einsum(
            "ij,jk,ik->i", self.A, self.Sigma - self.Kmm, self.A
        )
        self.tau2_raw = tau2
        self.tau = np.sqrt(np.maximum(tau2, TAU2_FLOOR))
        self.F = state.nat2_factor

    def kl(self) -> float:
        M = self.Kmm.shape[0]
        logdet_K = 2.0 * float(np.log(np.diag(self.Lm)).sum())
        logdet_S = -2.0 * float(np.log(np.diag(self.F)).sum())
        alpha = self.Kmm_inv @ self.r
        return 0.5 * (
            logdet_K
            - logdet_S
            - M
            + float(np.trace(self.Kmm_inv @ self.Sigma))
            + float(self.r @ alpha)
        )


def q_f_moments(state: SparseGPState, X: np.ndarray) -> GaussianMoments:
    """Marginal moments of the projected latent function at the rows of X.

    theta_i = m(x_i) + [A (mu - m(Z))]_i and tau_i^2 is the corresponding
    diagonal of K_nn + A (Sigma - K_mm) A', floored at ``TAU2_FLOOR``.  All
    solves go through the Cholesky factor of K_mm.
    """
    fw = _StateForward(state, X)
    return GaussianMoments(fw.theta, fw.tau)


def gp_elbo_bound(state: SparseGPState, data: LabeledDataset, l: int = DEFAULT_TRUNCATION) -> float:
    """Series-bound objective: sum_i (y_i theta_i - eta_l) - KL(q(u) || p(u))."""
    fw = _StateForward(state, data.X)
    lik = float(data.y @ fw.theta - eta_values(fw.theta, fw.tau, l).sum())
    return lik - fw.kl()


def gp_elbo_mc(state: SparseGPState, data: LabeledDataset, n_samples: int = 10000, seed: int = 0):
    """Monte Carlo ELBO through the q(f) marginals, with standard error."""
    fw = _StateForward(state, data.X)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((int(n_samples), data.n))
    f = fw.theta + fw.tau * z
    ll = f @ data.y - softplus(f).sum(axis=1)
    return float(ll.mean()) - fw.kl(), float(ll.std(ddof=1) / math.sqrt(n_samples))


def gp_predict_proba(state: SparseGPState, X: np.ndarray) -> np.ndarray:
    """E_q[sigmoid(f(x))] at the rows of X by Gauss-Hermite quadrature."""
    moments = q_f_moments(state, X)
    nodes, weights = gauss_hermite_nodes(64)
    return sigmoid(moments.theta[:, None] + moments.tau[:, None] * nodes[None, :]) @ weights


# ---------------------------------------------------------------------------
# whitened optimizer machinery
# ---------------------------------------------------------------------------

def _chol_backward(L: np.ndarray, L_bar: np.ndarray) -> np.ndarray:
    """Adjoint of K w.r.t. K = L L' given the adjoint of the factor L."""
    P = np.tril(L.T @ L_bar)
    P[np.diag_indices_from(P)] *= 0.5
    inv_L = solve_triangular(L, np.eye(L.shape[0]), lower=True)
    K_bar = inv_L.T @ P @ inv_L
    return 0.5 * (K_bar + K_bar.T)


class _WhitenedForward:
    """Objective ingredients in prior-whitened variational coordinates."""

    def __init__(self, mu_w, F_w, Z, ls, sv, w, b, X, jitter):
        spec = KernelSpec(ls, sv, jitter)
        M = Z.shape[0]
        self.Kmm = kernel_matrix(spec, Z)
        self.Knm = kernel_matrix(spec, X, Z)
        self.knn = np.full(X.shape[0], sv + jitter)
        self.Lm = _chol_kmm(self.Kmm)
        # Atil = Knm Kmm^-1 Lm = Knm Lm^-T
        self.Atil = solve_triangular(self.Lm, self.Knm.T, lower=True).T
        inv_Fw = solve_triangular(F_w, np.eye(M), lower=True)
        self.Sigma_w = inv_Fw.T @ inv_Fw
        self.P_w = F_w @ F_w.T
        self.mu_w = mu_w
        self.F_w = F_w
        self.mX = X @ w + b
        self.theta = self.mX + self.Atil @ mu_w
        self.B_w = self.Sigma_w - np.eye(M)
        tau2 = self.knn + np.einsum("ij,jk,ik->i", self.Atil, self.B_w, self.Atil)
        self.tau2_raw = tau2
        self.tau2 = np.maximum(tau2, TAU2_FLOOR)
        self.tau = np.sqrt(self.tau2)
        self.Z, self.ls, self.sv, self.w, self.b, self.X = Z, ls, sv, w, b, X
        self.jitter = jitter

    def kl(self) -> float:
        # whitening makes the prior standard normal
        M = self.Kmm.shape[0]
        logdet_Sw = -2.0 * float(np.log(np.diag(self.F_w)).sum())
        return 0.5 * (
            -logdet_Sw - M + float(np.trace(self.Sigma_w)) + float(self.mu_w @ self.mu_w)
        )


class _GPPacking:
    """Order: nat1_w, log diag F_w, strict lower F_w, Z, log ls, log sv, w, b.

    The whitened variational pair is carried in natural coordinates
    (nat1_w = Sigma_w^-1 mu_w together with the precision factor F_w).
    """

    def __init__(self, M: int, p: int):
        self.M, self.p = M, p
        self.i_lower = np.tril_indices(M, -1)
        self.n_lower = M * (M - 1) // 2

    def flatten(self, nat1_w, F_w, Z, ls, sv, w, b):
        return np.concatenate([
            nat1_w,
            np.log(np.diag(F_w)),
            F_w[self.i_lower],
            Z.ravel(),
            np.log(ls),
            [math.log(sv)],
            w,
            [b],
        ])

    def unflatten(self, v):
        M, p = self.M, self.p
        i = 0
        nat1_w = v[i : i + M]; i += M
        F_w = np.zeros((M, M))
        F_w[np.diag_indices(M)] = np.exp(v[i : i + M]); i += M
        F_w[self.i_lower] = v[i : i + self.n_lower]; i += self.n_lower
        Z = v[i : i + M * p].reshape(M, p); i += M * p
        ls = np.exp(v[i : i + p]); i += p
        sv = float(np.exp(v[i])); i += 1
        w = v[i : i + p]; i += p
        b = v[i]
        return nat1_w, F_w, Z, ls, sv, w, b

    def forward(self, v, X, jitter=_FIT_JITTER):
        nat1_w, F_w, Z, ls, sv, w, b = self.unflatten(v)
        inv_Fw = solve_triangular(F_w, np.eye(self.M), lower=True)
        mu_w = inv_Fw.T @ (inv_Fw @ nat1_w)
        return _WhitenedForward(mu_w, F_w, Z, ls, sv, w, b, X, jitter)


def _whitened_grad(fw: _WhitenedForward, pk: _GPPacking, u: np.ndarray, v: np.ndarray):
    """Gradient of sum_i (u_i theta_i + v_i tau2_i) - KL w.r.t. packed params.

    ``u`` and ``v`` are the per-observation adjoints d objective / d theta_i
    and d objective / d tau2_i of whichever likelihood bound is in use; the
    KL term is folded in here because it is bound-independent.
    """
    Atil, B_w, Sigma_w, mu_w = fw.Atil, fw.B_w, fw.Sigma_w, fw.mu_w
    Lm, Knm, Z, ls, sv, X = fw.Lm, fw.Knm, fw.Z, fw.ls, fw.sv, fw.X
    M, p = pk.M, pk.p

    # adjoints of the whitened moment parameters, KL included
    mu_bar = Atil.T @ u - mu_w
    Sigma_bar = Atil.T @ (v[:, None] * Atil) - 0.5 * (np.eye(M) - fw.P_w)

    # chain into whitened natural coordinates (mu_w = Sigma_w nat1_w)
    nat1_bar = Sigma_w @ mu_bar
    P_bar = -np.outer(nat1_bar, mu_w) - Sigma_w @ Sigma_bar @ Sigma_w
    F_bar = np.tril((P_bar + P_bar.T) @ fw.F_w)
    g_logdiagF = np.diag(F_bar) * np.diag(fw.F_w)
    g_lowerF = F_bar[pk.i_lower]

    # adjoint of Atil = Knm Lm^-T, then of Knm and of the Cholesky factor
    Atil_bar = np.outer(u, mu_w) + 2.0 * (v[:, None] * (Atil @ B_w))
    inv_Lm = solve_triangular(Lm, np.eye(M), lower=True)
    Knm_bar = Atil_bar @ inv_Lm
    Lm_bar = -np.tril(inv_Lm.T @ (Atil_bar.T @ Atil))
    Kmm_bar = _chol_backward(Lm, Lm_bar)

    # kernel adjoints -> hyperparameters and inducing locations
    Hnm = Knm_bar * Knm
    Kmm_nj = fw.Kmm - fw.jitter * np.eye(M)
    Hmm = Kmm_bar * Kmm_nj
    g_log_sv = float(Hnm.sum() + Hmm.sum() + sv * v.sum())
    g_Z = np.zeros((M, p))
    g_log_ls = np.zeros(p)
    Hs = Hmm + Hmm.T
    for d in range(p):
        inv_ls2 = 1.0 / (ls[d] * ls[d])
        dX = X[:, d][:, None] - Z[None, :, d]
        g_Z[:, d] += (Hnm * dX).sum(axis=0) * inv_ls2
        g_log_ls[d] += float((Hnm * dX * dX).sum()) * inv_ls2
        dZ = Z[:, d][:, None] - Z[None, :, d]
        g_Z[:, d] -= (Hs * dZ).sum(axis=1) * inv_ls2
        g_log_ls[d] += 0.5 * float((Hs * dZ * dZ).sum()) * inv_ls2

    # whitening absorbs m(Z), so the mean function only acts through m(X)
    g_w = X.T @ u
    g_b = float(u.sum())

    return np.concatenate([
        nat1_bar, g_logdiagF, g_lowerF, g_Z.ravel(), g_log_ls, [g_log_sv], g_w, [g_b]
    ])


def _init_gp(data: LabeledDataset, n_inducing: int, config: FitConfig):
    """Seeded start: subsampled Z, unit kernel, mu_w ~ N(0, I), Sigma_w = 0.35 I."""
    if n_inducing > data.n:
        raise ValueError("the number of inducing points cannot exceed n")
    rng = np.random.default_rng(config.seed)
    mu_w0 = rng.standard_normal(n_inducing)
    idx = rng.choice(data.n, size=n_inducing, replace=False)
    Z0 = data.X[idx].copy()
    prec0 = 1.0 / 0.35
    F_w0 = math.sqrt(prec0) * np.eye(n_inducing)
    nat1_w0 = prec0 * mu_w0
    ls0 = np.full(data.p, 0.5)
    return nat1_w0, F_w0, Z0, ls0, 1.0, np.zeros(data.p), 0.0, rng


def _state_from_whitened(fw: _WhitenedForward) -> SparseGPState:
    """Convert the optimizer's whitened coordinates to a public state."""
    mu_u = fw.Z @ fw.w + fw.b + fw.Lm @ fw.mu_w
    Sigma_u = fw.Lm @ fw.Sigma_w @ fw.Lm.T
    nat1, F = natural_from_moments(mu_u, 0.5 * (Sigma_u + Sigma_u.T))
    return SparseGPState(
        Z=fw.Z,
        nat1=nat1,
        nat2_factor=F,
        kernel=KernelSpec(fw.ls, fw.sv, fw.jitter),
        mean=MeanFunction(fw.w, float(fw.b)),
    )


def _gp_fit_result(pk, x, trace, converged, X, t_start):
    fw = pk.forward(x, X)
    state = _state_from_whitened(fw)
    mu, Sigma = variational_moments(state)
    posterior = VariationalGaussian(mu, cholesky(Sigma, lower=True))
    return state, FitResult(
        posterior=posterior,
        elbo_trace=np.asarray(trace, dtype=np.float64),
        iterations=len(trace),
        converged=converged,
        wall_time=time.perf_counter() - t_start,
    )


def _viper_adjoints(fw: _WhitenedForward, y: np.ndarray, l: int):
    val, g_th, g_ta = eta_gradient_values(fw.theta, fw.tau, l)
    obj = float(y @ fw.theta - val.sum()) - fw.kl()
    u = y - g_th
    v = np.where(fw.tau2_raw > TAU2_FLOOR, -g_ta / (2.0 * fw.tau), 0.0)
    return obj, u, v


def _vipg_adjoints(fw: _WhitenedForward, y: np.ndarray):
    # closed-form refresh of the quadratic-bound scales before each step;
    # at the refreshed optimum the envelope theorem makes d/dt terms vanish
    t = np.sqrt(fw.theta * fw.theta + fw.tau2)
    a = _jj_slope_values(t)
    vals = jj_expected_bound_values(fw.theta, fw.tau, t)
    obj = float(y @ fw.theta - vals.sum()) - fw.kl()
    u = y - 0.5 - a * fw.theta
    v = np.where(fw.tau2_raw > TAU2_FLOOR, -0.5 * a, 0.0)
    return obj, u, v


def _fit_gp_linesearch(data, n_inducing, config, adjoints):
    t_start = time.perf_counter()
    nat1_w0, F_w0, Z0, ls0, sv0, w0, b0, _ = _init_gp(data, n_inducing, config)
    pk = _GPPacking(n_inducing, data.p)
    x0 = pk.flatten(nat1_w0, F_w0, Z0, ls0, sv0, w0, b0)
    X = data.X

    def value(vec):
        # exploratory line-search steps may overflow the log-scale
        # parameters or break the kernel factorization; those candidates
        # are simply rejected
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                return adjoints(pk.forward(vec, X))[0]
        except (np.linalg.LinAlgError, ValueError, OverflowError):
            return -np.inf

    def grad(vec):
        fw = pk.forward(vec, X)
        _, u, v = adjoints(fw)
        return _whitened_grad(fw, pk, u, v)

    res = ascend(value, grad, x0, config.step_size, config.max_iters, config.rel_tol)
    return _gp_fit_result(pk, res.x, res.trace, res.converged, X, t_start)


def fit_viper_gp(data: LabeledDataset, n_inducing: int, config: FitConfig):
    """Joint gradient ascent on the series-bound GP objective.

    Optimizes the variational parameters together with the inducing
    locations (initialized by subsampling X), ARD lengthscales (0.5),
    signal variance (1) and the linear mean function.  Returns
    ``(SparseGPState, FitResult)``.
    """
    return _fit_gp_linesearch(
        data, n_inducing, config, lambda fw: _viper_adjoints(fw, data.y, config.l)
    )


def fit_vipg_gp(data: LabeledDataset, n_inducing: int, config: FitConfig):
    """Same optimizer on the quadratic-bound objective with refreshed scales."""
    return _fit_gp_linesearch(
        data, n_inducing, config, lambda fw: _vipg_adjoints(fw, data.y)
    )


def fit_vimc_gp(data: LabeledDataset, n_inducing: int, config: FitConfig):
    """Adam on the reparameterized Monte Carlo objective through q(f)."""
    t_start = time.perf_counter()
    nat1_w0, F_w0, Z0, ls0, sv0, w0, b0, rng = _init_gp(data, n_inducing, config)
    pk = _GPPacking(n_inducing, data.p)
    x0 = pk.flatten(nat1_w0, F_w0, Z0, ls0, sv0, w0, b0)
    X, y, S = data.X, data.y, config.mc_samples

    def value_and_grad(vec, _t):
        fw = pk.forward(vec, X)
        z = rng.standard_normal((S, data.n))
        f = fw.theta + fw.tau * z
        ll = f @ y - softplus(f).sum(axis=1)
        value = float(ll.mean()) - fw.kl()
        resid = y - sigmoid(f)
        u = resid.mean(axis=0)
        d_tau = (resid * z).mean(axis=0)
        v = np.where(fw.tau2_raw > TAU2_FLOOR, d_tau / (2.0 * fw.tau), 0.0)
        return value, _whitened_grad(fw, pk, u, v)

    res = adam_ascend(value_and_grad, x0, config.step_size,
                      config.max_iters, config.rel_tol)
    return _gp_fit_result(pk, res.x, res.trace, res.converged, X, t_start)
