"""Numerically stable scalar special functions.

All functions are pure, accept floats or NumPy arrays (broadcasting), and
are safe to call concurrently.  The heavy lifting is delegated to the
scaled-erfc machinery inside ``scipy.special`` (``ndtr`` / ``log_ndtr``),
which stays accurate far into the tails where a naive ``log(cdf)`` would
underflow.
"""

import numpy as np
from scipy.special import expit as _expit
from scipy.special import log_ndtr as _log_ndtr
from scipy.special import ndtr as _ndtr

__all__ = [
    "std_normal_pdf",
    "std_normal_cdf",
    "log_std_normal_cdf",
    "exp_times_cdf",
    "softplus",
    "sigmoid",
]

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# log of the largest finite float64; exp() of anything above this overflows
_LOG_MAX = np.log(np.finfo(np.float64).max)


def std_normal_pdf(x):
    """Standard normal density phi(x) = exp(-x^2/2) / sqrt(2*pi)."""
    x = np.asarray(x, dtype=np.float64)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def std_normal_cdf(x):
    """Standard normal distribution function Phi(x), in [0, 1]."""
    return _ndtr(np.asarray(x, dtype=np.float64))


def log_std_normal_cdf(x):
    """log Phi(x) without underflow for arbitrarily negative x.

    For x >= 0 this agrees with ``log(std_normal_cdf(x))`` to better than
    1e-12 relative; for x -> -inf it follows the asymptotic expansion
    -x^2/2 - log(-x * sqrt(2*pi)) + log(1 + O(x^-2)).
    """
    return _log_ndtr(np.asarray(x, dtype=np.float64))


def exp_times_cdf(a, b):
    """exp(a) * Phi(b), evaluated in log space as exp(a + log Phi(b)).

    Stays finite for pairs such as (700, -40) where the naive product is a
    0 * inf indeterminate; underflow returns 0.  Raises ``OverflowError``
    when the true product exceeds the float64 range (it is never silently
    returned as inf).
    """
    a = np.asarray(a, dtype=np.float64)
    log_val = a + _log_ndtr(np.asarray(b, dtype=np.float64))
    if np.any(log_val > _LOG_MAX):
        raise OverflowError("exp(a) * Phi(b) exceeds the float64 range")
    return np.exp(log_val)


def softplus(x):
    """log(1 + exp(x)) computed as max(x, 0) + log1p(exp(-|x|))."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    """Logistic function 1 / (1 + exp(-x)), saturation-safe."""
    return _expit(np.asarray(x, dtype=np.float64))
