"""Real-time algebraic estimation of F in the ultra-local model y^(nu) = F + alpha*u.

For nu = 1, over a window of length tau (sigma is window-local time, 0 at the
oldest sample):

    F_est = -(6/tau^3) * int_0^tau [ (tau - 2 sigma) y + alpha sigma (tau - sigma) u ] dsigma

For nu = 2:

    F_est = (60/tau^5) int (tau^2 - 6 tau sigma + 6 sigma^2) y dsigma
            - (30 alpha/tau^5) int sigma^2 (tau - sigma)^2 u dsigma

Both kernels vanish (with enough derivatives) at the window ends, so initial
conditions drop out. The integrals are taken with trapezoid weights that are
then corrected, by the smallest polynomial adjustment, to reproduce the
continuum moments exactly: the y weights kill polynomials of degree < nu and
return F from t^nu/nu!, the u weights sum to one. The estimate is therefore
exact on constant-F data and converges at second order otherwise.
"""

import logging
from collections import deque
from functools import lru_cache
from typing import Callable, Deque, Tuple

import numpy as np
from scipy.integrate import quad

from core import ModelFreeError

logger = logging.getLogger(__name__)


class EstimatorNotReady(ModelFreeError):
    """Raised while the window still holds fewer samples than its capacity."""
    pass


class SampledWindow:
    """
    Ring buffer of the most recent (t, y, u) samples, equally spaced by the sample period.
    A window of length tau holds round(tau/T_e) + 1 samples, never fewer than 3.
    u is the input held from t onward; the newest one is not known until the
    controller has run, and its weight is zero.
    """
    def __init__(self, window: float, sample_period: float):
        if not window > 0:
            raise ValueError(f"estimator window must be positive, got {window}")
        if not sample_period > 0:
            raise ValueError(f"sample period must be positive, got {sample_period}")
        self.sample_period = sample_period
        self.capacity = max(3, int(round(window / sample_period)) + 1)
        self.samples: Deque[Tuple[float, float, float]] = deque(maxlen=self.capacity)
        if (self.capacity - 1) * sample_period > window * (1 + 1e-9):
            logger.warning(f"Estimator window {window} s is shorter than two sample periods; "
                           f"widened to {self.span:g} s ({self.capacity} samples).")

    @property
    def span(self) -> float:
        """Window length actually covered by the stored samples, seconds."""
        return (self.capacity - 1) * self.sample_period

    @property
    def is_full(self) -> bool:
        return len(self.samples) == self.capacity

    def push(self, t: float, y: float, u: float) -> None:
        if self.samples:
            gap = t - self.samples[-1][0]
            if abs(gap - self.sample_period) > 1e-9 * max(1.0, abs(t)):
                raise ValueError(f"samples must be spaced by {self.sample_period} s, got a gap of {gap} s")
        self.samples.append((t, y, u))

    def hold_input(self, u: float) -> None:
        """Sets the newest sample's input to the one held from its instant onward."""
        t, y, _ = self.samples[-1]
        self.samples[-1] = (t, y, u)

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        data = np.asarray(self.samples, dtype=float)
        return data[:, 1], data[:, 2]


def _trapezoid(n: int, span: float) -> Tuple[np.ndarray, np.ndarray]:
    sigma = np.linspace(0.0, span, n)
    q = np.full(n, span / (n - 1))
    q[0] *= 0.5
    q[-1] *= 0.5
    return sigma, q


@lru_cache(maxsize=64)
def estimator_weights(n: int, span: float, nu: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Discrete weights (c, g) such that F_est = c.y - alpha * g.u over n samples
    covering span seconds.
    """
    if n < 3:
        raise ValueError(f"the estimator needs at least 3 samples, got {n}")
    if not span > 0:
        raise ValueError(f"window span must be positive, got {span}")
    sigma, q = _trapezoid(n, span)

    if nu == 1:
        base = -(6.0 / span ** 3) * q * (span - 2.0 * sigma)
        moments = np.vstack([np.ones(n), sigma])
        target = np.array([0.0, 1.0])
        kernel_u = sigma * (span - sigma)
    elif nu == 2:
        base = (60.0 / span ** 5) * q * (span ** 2 - 6.0 * span * sigma + 6.0 * sigma ** 2)
        moments = np.vstack([np.ones(n), sigma, sigma ** 2 / 2.0])
        target = np.array([0.0, 0.0, 1.0])
        kernel_u = (sigma * (span - sigma)) ** 2
    else:
        raise ValueError(f"derivation order must be 1 or 2, got {nu}")

    # smallest correction (in the row space of the moment matrix) that matches the moments exactly
    residual = target - moments @ base
    correction = moments.T @ np.linalg.solve(moments @ moments.T, residual)
    c = base + correction

    g = q * kernel_u
    g = g / g.sum()
    c.setflags(write=False)
    g.setflags(write=False)
    return c, g


def estimate_F(window: SampledWindow, alpha: float, nu: int = 1) -> float:
    """F_est from a full window; raises EstimatorNotReady during warm-up."""
    if alpha == 0:
        raise ValueError("alpha must be non-zero")
    if not window.is_full:
        raise EstimatorNotReady(f"window holds {len(window.samples)}/{window.capacity} samples")
    c, g = estimator_weights(window.capacity, window.span, nu)
    y, u = window.arrays()
    return float(c @ y - alpha * (g @ u))


def continuum_estimate(y_fn: Callable[[float], float], u_fn: Callable[[float], float], t: float,
                       span: float, alpha: float, nu: int = 1) -> float:
    """The same estimate with the integrals done by adaptive quadrature (reference values for tests)."""
    start = t - span
    if nu == 1:
        y_part = quad(lambda s: (span - 2.0 * s) * y_fn(start + s), 0.0, span, epsabs=1e-13, epsrel=1e-13)[0]
        u_part = quad(lambda s: s * (span - s) * u_fn(start + s), 0.0, span, epsabs=1e-13, epsrel=1e-13)[0]
        return -(6.0 / span ** 3) * (y_part + alpha * u_part)
    y_part = quad(lambda s: (span ** 2 - 6.0 * span * s + 6.0 * s * s) * y_fn(start + s), 0.0, span,
                  epsabs=1e-13, epsrel=1e-13)[0]
    u_part = quad(lambda s: (s * (span - s)) ** 2 * u_fn(start + s), 0.0, span, epsabs=1e-13, epsrel=1e-13)[0]
    return (60.0 / span ** 5) * y_part - (30.0 * alpha / span ** 5) * u_part


def f_true_nonlinear(state: Tuple[float, float], u: float, alpha: float = 1.0) -> float:
    """
    Exact F of the nu = 1 model for the nonlinear plant, from its realisation
    (x1, x2): y_dot = -3 x1 - 2 x2 + u^3, F = y_dot - alpha u.
    """
    x1, x2 = state
    return -3.0 * x1 - 2.0 * x2 + u ** 3 - alpha * u


def f_true_nonlinear_display(y: float, y_ddot: float, u: float, u_dot: float) -> float:
    """F = (3 u_dot u^2 + 2 u^3 - 4 u - y_ddot - 3 y)/4, the plant equation solved for y_dot - u (alpha = 1)."""
    return (3.0 * u_dot * u * u + 2.0 * u ** 3 - 4.0 * u - y_ddot - 3.0 * y) / 4.0

