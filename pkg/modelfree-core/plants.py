"""The three benchmark plants, integrated with fixed-step RK4 under zero-order hold.

    nonlinear       x1' = x2, x2' = -3 x1 - 4 x2 + u^3, y = 2 x1 + x2
                    (i.e. y'' + 4 y' + 3 y = (u^3)' + 2 u^3)
    linear          y' = (3 y + u)/2                  (open-loop unstable)
    linear-delayed  the linear plant fed through a transport delay

Any plant can sit behind the delay line; the commanded input enters the line
and the input leaving it is the one the plant sees.
"""

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from core import ModelFreeError, PlantId, Scenario
from settings import settings

logger = logging.getLogger(__name__)


class PlantDiverged(ModelFreeError):
    """Raised when the plant state leaves the divergence limit."""
    def __init__(self, t: float, magnitude: float):
        self.t = t
        self.magnitude = magnitude
        super().__init__(f"plant diverged at t = {t:.4f} s (|x| = {magnitude:.3e})")


@dataclass(frozen=True)
class PlantSample:
    y_measured: float
    y_clean: float
    y_dot: float


def rk4_step(fn: Callable[[np.ndarray, float], np.ndarray], x: np.ndarray, u: float, h: float) -> np.ndarray:
    """One classical Runge-Kutta step of x' = fn(x, u) with u held."""
    k1 = fn(x, u)
    k2 = fn(x + 0.5 * h * k1, u)
    k3 = fn(x + 0.5 * h * k2, u)
    k4 = fn(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class Plant:
    """Common stepping, delay line, measurement noise and divergence check."""
    name = "plant"

    def __init__(self, sample_period: float, delay: float = 0.0, noise_std: float = 0.0, seed: int = 0,
                 initial_output: float = 0.0, divergence_limit: Optional[float] = None):
        if not sample_period > 0:
            raise ValueError(f"sample period must be positive, got {sample_period}")
        if delay < 0 or noise_std < 0:
            raise ValueError("delay and noise_std must be non-negative")
        self.sample_period = sample_period
        self.noise_std = noise_std
        self.divergence_limit = divergence_limit or settings.divergence_limit
        lag = int(round(delay / sample_period))
        if abs(lag * sample_period - delay) > 1e-9 * max(1.0, delay):
            logger.warning(f"Delay {delay} s is not a multiple of the sample period; using {lag * sample_period:g} s.")
        self.delay_steps = lag
        self.delay_line = deque([0.0] * lag)
        self.rng = np.random.default_rng(seed)
        self.t = 0.0
        self.u_applied = 0.0
        self.x = self.initial_state(initial_output)

    def initial_state(self, y0: float) -> np.ndarray:
        raise NotImplementedError

    def derivatives(self, x: np.ndarray, u: float) -> np.ndarray:
        raise NotImplementedError

    def output(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def output_derivatives(self, u: Optional[float] = None) -> Tuple[float, float]:
        """(y', y'') at the current instant with u held (default: the last applied input)."""
        raise NotImplementedError

    @property
    def y(self) -> float:
        return self.output(self.x)

    def measure(self) -> float:
        if self.noise_std > 0:
            return self.y + self.noise_std * float(self.rng.standard_normal())
        return self.y

    def transmit(self, u: float) -> float:
        """Pushes the commanded input through the delay line and returns the input the plant sees."""
        self.delay_line.append(u)
        return self.delay_line.popleft()

    def step(self, u: float) -> PlantSample:
        applied = self.transmit(u)
        x_next = rk4_step(self.derivatives, self.x, applied, self.sample_period)
        magnitude = float(np.max(np.abs(x_next)))
        if not np.isfinite(magnitude) or magnitude > self.divergence_limit:
            raise PlantDiverged(self.t + self.sample_period, magnitude)
        self.x = x_next
        self.u_applied = applied
        self.t += self.sample_period
        y_dot, _ = self.output_derivatives()
        return PlantSample(self.measure(), self.y, y_dot)

    def next_input(self, u: float) -> float:
        """Input the plant will hold over the coming period if u is commanded now."""
        return self.delay_line[0] if self.delay_line else u

    def f_true(self, alpha: float, u: Optional[float] = None) -> float:
        """Exact F = y' - alpha u of the first-order ultra-local model, with u held (default: last applied)."""
        u = self.u_applied if u is None else u
        return self.output_derivatives(u)[0] - alpha * u


class NonlinearPlant(Plant):
    name = PlantId.NONLINEAR.value

    def initial_state(self, y0: float) -> np.ndarray:
        return np.array([0.5 * y0, 0.0])

    def derivatives(self, x: np.ndarray, u: float) -> np.ndarray:
        return np.array([x[1], -3.0 * x[0] - 4.0 * x[1] + u ** 3])

    def output(self, x: np.ndarray) -> float:
        return float(2.0 * x[0] + x[1])

    def output_derivatives(self, u: Optional[float] = None) -> Tuple[float, float]:
        x1, x2 = self.x
        u3 = (self.u_applied if u is None else u) ** 3
        return float(-3.0 * x1 - 2.0 * x2 + u3), float(6.0 * x1 + 5.0 * x2 - 2.0 * u3)


class LinearPlant(Plant):
    name = PlantId.LINEAR.value

    def initial_state(self, y0: float) -> np.ndarray:
        return np.array([float(y0)])

    def derivatives(self, x: np.ndarray, u: float) -> np.ndarray:
        return np.array([1.5 * x[0] + 0.5 * u])

    def output(self, x: np.ndarray) -> float:
        return float(x[0])

    def output_derivatives(self, u: Optional[float] = None) -> Tuple[float, float]:
        y_dot = 1.5 * float(self.x[0]) + 0.5 * (self.u_applied if u is None else u)
        return y_dot, 1.5 * y_dot


def plant_step(plant: Plant, u: float) -> PlantSample:
    return plant.step(u)


def make_plant(scenario: Scenario) -> Plant:
    kwargs = dict(sample_period=scenario.sample_period, delay=scenario.delay, noise_std=scenario.noise_std,
                  seed=scenario.seed, initial_output=scenario.initial_output)
    if scenario.plant == PlantId.NONLINEAR:
        return NonlinearPlant(**kwargs)
    plant = LinearPlant(**kwargs)
    if scenario.plant == PlantId.LINEAR_DELAYED:
        plant.name = PlantId.LINEAR_DELAYED.value
    return plant
