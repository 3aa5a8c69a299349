"""Intelligent controllers and the reference trajectory generator.

    u = (-F_est + y*^(nu) + Fr(e)) / alpha,   e = y* - y

with Fr(e) = K_P e + K_I int(e) + K_D de/dt (the terms present depend on the
controller family). With a perfect estimate the closed loop reduces to the
error dynamics e^(nu) + Fr(e) = 0, which simulate_error_dynamics integrates
directly.
"""

import math
import logging
from collections import deque
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import expm

from core import ControllerKind, Gains, InvalidGainsError, ModelFreeError, Setpoints, setpoint_at

logger = logging.getLogger(__name__)


class ControllerFault(ModelFreeError):
    """Raised when the controller is fed a non-finite value."""
    pass


class IntelligentController:
    """
    Discrete iP / iPI / iPD / iPID.
    The integral uses the rectangle rule, the derivative a backward difference
    (zero on the first step). Saturation and anti-windup are off unless asked for.
    """
    def __init__(self, kind: ControllerKind, gains: Gains, sample_period: float,
                 output_limit: Optional[float] = None, anti_windup: bool = False):
        if gains.kind != kind:
            raise InvalidGainsError(f"gains describe {gains.kind.value}, controller is {kind.value}")
        if not sample_period > 0:
            raise ValueError(f"sample period must be positive, got {sample_period}")
        if output_limit is not None and not output_limit > 0:
            raise ValueError(f"output_limit must be positive, got {output_limit}")
        self.kind = kind
        self.gains = gains
        self.sample_period = sample_period
        self.output_limit = output_limit
        self.anti_windup = anti_windup
        self.reset()

    def reset(self) -> None:
        self.integral = 0.0
        self.prev_error: Optional[float] = None
        self.saturated = False

    def feedback(self, e: float, integral: float) -> float:
        g = self.gains
        value = g.kp * e
        if self.kind.has_integral:
            value += g.ki * integral
        if self.kind.has_derivative:
            derivative = 0.0 if self.prev_error is None else (e - self.prev_error) / self.sample_period
            value += g.kd * derivative
        return value

    def _law(self, f_est: float, y_star_deriv: float, e: float) -> Tuple[float, float, bool]:
        for name, value in (("f_est", f_est), ("y_star_deriv", y_star_deriv), ("e", e)):
            if not math.isfinite(value):
                raise ControllerFault(f"non-finite {name} = {value}")

        integral = self.integral + e * self.sample_period if self.kind.has_integral else 0.0
        u = (-f_est + y_star_deriv + self.feedback(e, integral)) / self.gains.alpha
        if not math.isfinite(u):
            raise ControllerFault(f"control overflow (u = {u})")

        saturated = False
        if self.output_limit is not None and abs(u) > self.output_limit:
            saturated = True
            pushing_further = u * e * self.gains.alpha > 0
            if self.anti_windup and pushing_further:
                integral = self.integral
            u = math.copysign(self.output_limit, u)
        return u, integral, saturated

    def preview(self, f_est: float, y_star_deriv: float, e: float) -> float:
        """The output step() would return, without touching the controller state."""
        return self._law(f_est, y_star_deriv, e)[0]

    def step(self, f_est: float, y_star_deriv: float, e: float) -> float:
        u, self.integral, self.saturated = self._law(f_est, y_star_deriv, e)
        self.prev_error = e
        return u


def control_step(controller: IntelligentController, f_est: float, y_star_deriv: float, e: float) -> float:
    return controller.step(f_est, y_star_deriv, e)


@dataclass(frozen=True)
class ReferenceSample:
    value: float
    rate: float
    accel: float

    def derivative(self, nu: int) -> float:
        return self.rate if nu == 1 else self.accel


class ReferenceFilter:
    """
    Critically damped low-pass y*'' + 2w y*' + w^2 y* = w^2 r with w = 1/tau,
    discretised exactly under zero-order hold. tau = 0 passes r through with
    zero derivatives.
    """
    def __init__(self, tau: float, sample_period: float, initial: float = 0.0):
        if tau < 0:
            raise ValueError(f"reference time constant must be non-negative, got {tau}")
        self.tau = tau
        self.sample_period = sample_period
        self.state = np.array([initial, 0.0])
        if tau > 0:
            w = 1.0 / tau
            self.omega = w
            aug = np.zeros((3, 3))
            aug[:2, :2] = [[0.0, 1.0], [-w * w, -2.0 * w]]
            aug[1, 2] = w * w
            phi = expm(aug * sample_period)
            self.a_d = phi[:2, :2]
            self.b_d = phi[:2, 2]

    def step(self, r: float) -> ReferenceSample:
        """Reference at the current instant, then advance one period holding r."""
        if self.tau == 0:
            return ReferenceSample(r, 0.0, 0.0)
        y, dy = self.state
        w = self.omega
        sample = ReferenceSample(float(y), float(dy), float(w * w * (r - y) - 2.0 * w * dy))
        self.state = self.a_d @ self.state + self.b_d * r
        return sample


def reference_step(setpoints: Setpoints, reference: ReferenceFilter, t: float,
                   nu: int = 1) -> Tuple[float, float]:
    """(y*, y*^(nu)) at time t for the given schedule: the rate for nu = 1, the acceleration for nu = 2."""
    if nu not in (1, 2):
        raise ValueError(f"derivation order must be 1 or 2, got {nu}")
    sample = reference.step(setpoint_at(setpoints, t))
    return sample.value, sample.derivative(nu)


def simulate_error_dynamics(kind: ControllerKind, gains: Gains, e0: float, sample_period: float,
                            duration: float, delay: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    The loop with a perfect estimate: e^(nu) = -alpha u(t - delay), u = Fr(e)/alpha computed
    at every sample and held between samples. Returns (t, e) sampled at the period.
    """
    controller = IntelligentController(kind, gains, sample_period)
    h = sample_period
    n = int(round(duration / h))
    lag = int(round(delay / h))
    line = deque([0.0] * lag)
    e, e_dot = float(e0), 0.0
    times = np.arange(n + 1) * h
    errors = np.empty(n + 1)
    for k in range(n + 1):
        errors[k] = e
        if k == n:
            break
        if abs(e) > 1e12:
            errors[k + 1:] = np.nan
            logger.debug(f"error dynamics diverged at t = {times[k]:.3f} s (delay {delay})")
            break
        line.append(controller.step(0.0, 0.0, e))
        v = gains.alpha * line.popleft()
        if kind.nu == 1:
            e -= h * v
        else:
            e += h * e_dot - 0.5 * h * h * v
            e_dot -= h * v
    return times, errors


def error_growing(errors: np.ndarray) -> bool:
    """True when the late part of a trajectory is larger than the early part (or it blew up)."""
    if not np.all(np.isfinite(errors)):
        return True
    n = len(errors)
    early = np.max(np.abs(errors[n // 4: n // 2]))
    late = np.max(np.abs(errors[3 * n // 4:]))
    return bool(late > early)
