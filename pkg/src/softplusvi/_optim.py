"""Shared optimizer loops for the fit_* routines.

``ascend`` is plain gradient ascent with a backtracking line search (halve
the step until the objective does not decrease), which makes the recorded
objective trace nondecreasing by construction.  ``adam_ascend`` handles the
stochastic objectives, with the stopping rule applied to an exponential
moving average of the noisy values.
"""

from typing import Callable, NamedTuple

import numpy as np

_MAX_HALVINGS = 60


class AscentResult(NamedTuple):
    x: np.ndarray
    trace: np.ndarray
    converged: bool


def relative_change(current, previous):
    denom = abs(previous)
    if denom == 0.0:
        return np.inf if current != previous else 0.0
    return abs(current - previous) / denom


def ascend(
    value: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    step_size: float,
    max_iters: int,
    rel_tol: float,
) -> AscentResult:
    """Maximize ``value`` from ``x0``; stop on relative objective change.

    The accepted step length is carried between iterations (doubled before
    each new search) so the line search adapts to the local scale without
    restarting from ``step_size`` every time.  A candidate step is accepted
    only if it yields a finite objective that does not decrease.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    f = float(value(x))
    if not np.isfinite(f):
        raise RuntimeError("objective is non-finite at the initial point")
    step = float(step_size)
    trace = []
    prev = f
    converged = False
    for it in range(1, max_iters + 1):
        g = np.asarray(grad(x), dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise RuntimeError(f"non-finite gradient at iteration {it}")
        s = 2.0 * step
        accepted = False
        for _ in range(_MAX_HALVINGS):
            cand = x + s * g
            fc = float(value(cand))
            if np.isfinite(fc) and fc >= f:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            # no ascent step representable: stationary to machine precision
            trace.append(f)
            converged = True
            break
        x, f, step = cand, fc, s
        trace.append(f)
        if relative_change(f, prev) < rel_tol:
            converged = True
            break
        prev = f
    return AscentResult(x, np.asarray(trace, dtype=np.float64), converged)


def adam_ascend(
    value_and_grad: Callable[[np.ndarray, int], tuple],
    x0: np.ndarray,
    learning_rate: float,
    max_iters: int,
    rel_tol: float,
    ema_decay: float = 0.9,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AscentResult:
    """Adam on a stochastic objective; EMA-smoothed relative-change stop.

    ``value_and_grad(x, t)`` is called once per iteration with the 1-based
    iteration index and must return ``(value, gradient)`` computed on that
    iteration's fresh sample draw.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    trace = []
    ema_prev = None
    ema = None
    converged = False
    for t in range(1, max_iters + 1):
        f, g = value_and_grad(x, t)
        f = float(f)
        g = np.asarray(g, dtype=np.float64)
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            raise RuntimeError(f"non-finite stochastic objective at iteration {t}")
        trace.append(f)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        x = x + learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        ema = f if ema is None else ema_decay * ema + (1.0 - ema_decay) * f
        if ema_prev is not None and relative_change(ema, ema_prev) < rel_tol:
            converged = True
            break
        ema_prev = ema
    return AscentResult(x, np.asarray(trace, dtype=np.float64), converged)
