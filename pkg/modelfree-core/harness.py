"""Closed-loop simulation harness: scenario runs, bundled presets and sweeps.

One sample period of a run:
    measure y -> reference step -> push (t, y) into the window -> estimate F
    -> control step -> record the input held from t onward -> delay line -> plant step

f_true and the oracle estimate are the F of the coming hold interval, i.e. with
the input the plant will actually see until the next sample.

A run never raises for an unstable loop: divergence and controller faults end
the trace early and mark the result unstable.
"""

import math
import logging
import concurrent.futures
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import newton

from core import (ControllerKind, Gains, PlantId, Scenario, ScenarioError, TraceRow, load_scenario,
                  setpoint_at)
from control import ControllerFault, IntelligentController, ReferenceFilter, error_growing, simulate_error_dynamics
from estimator import EstimatorNotReady, SampledWindow, estimate_F, f_true_nonlinear, f_true_nonlinear_display
from plants import NonlinearPlant, Plant, PlantDiverged, make_plant
from settings import settings

logger = logging.getLogger(__name__)

PRESETS = ("fig1", "fig2", "fig3", "fig4", "fig5", "fig6")


@dataclass
class RunResult:
    scenario: Scenario
    trace: List[TraceRow]
    stable: bool
    tracking_rmse: float
    estimation_rmse: float
    relative_tracking: float
    warmup: float
    diverged_at: Optional[float] = None
    fault: Optional[str] = None
    name: str = field(default="run")

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(row, name) for row in self.trace], dtype=float)


def _rmse(values: np.ndarray) -> float:
    if values.size == 0:
        return math.nan
    return float(np.sqrt(np.mean(values ** 2)))


def _check_nonlinear_f(plant: NonlinearPlant, u: float, f_true: float) -> bool:
    y_ddot = plant.output_derivatives(u)[1]
    shown = f_true_nonlinear_display(plant.y, y_ddot, u, 0.0)
    return abs(shown - f_true) <= 1e-9 * max(1.0, abs(f_true))


def _check_order(s: Scenario) -> None:
    if s.controller.nu > s.plant.relative_degree:
        raise ScenarioError(
            f"controller {s.controller.value} (nu = {s.controller.nu}) cannot drive plant '{s.plant.value}': "
            f"its input reaches y^({s.plant.relative_degree}) directly, so y^({s.controller.nu}) depends on "
            f"the rate of a zero-order-held input", keys=["controller", "plant"])


def oracle_estimate(plant: Plant, controller: IntelligentController, alpha: float,
                    y_star_deriv: float, e: float) -> float:
    """
    Perfect F for the coming hold interval. Behind a delay the held input is
    already in the line; otherwise F depends on the input being computed, and
    f = F(u(f)) is solved with the secant method.
    """
    if plant.delay_steps > 0:
        return plant.f_true(alpha, plant.delay_line[0])
    start = plant.f_true(alpha)
    try:
        return float(newton(lambda f: f - plant.f_true(alpha, controller.preview(f, y_star_deriv, e)),
                            start, tol=1e-13, rtol=1e-12, maxiter=50))
    except RuntimeError as err:
        logger.warning(f"Oracle estimate did not converge ({err}); using the last applied input")
        return start


def run_scenario(scenario: Scenario, name: str = "run", output_limit: Optional[float] = None,
                 anti_windup: bool = False) -> RunResult:
    """Runs one closed-loop experiment and classifies it."""
    s = scenario
    _check_order(s)
    T = s.sample_period
    nu = s.controller.nu
    alpha = s.gains.alpha
    oracle = s.estimator == "oracle"

    stride = 1
    if s.t_est_mode == "loop":
        stride = max(1, int(round(s.estimator_window / T)))
        window = SampledWindow(2.0 * stride * T, stride * T)
    else:
        window = SampledWindow(s.estimator_window, T)
    plant = make_plant(s)
    controller = IntelligentController(s.controller, s.gains, stride * T,
                                       output_limit=output_limit, anti_windup=anti_windup)
    reference = ReferenceFilter(s.reference_tau, T, initial=s.initial_output)

    logger.info(f"Run '{name}': {s.plant.value} plant, {s.controller.value} kp={s.gains.kp} "
                f"tau_w={s.estimator_window} delay={s.delay} noise={s.noise_std} ({s.n_steps} steps)")

    trace: List[TraceRow] = []
    diverged_at: Optional[float] = None
    fault: Optional[str] = None
    cross_check_warned = False
    y = plant.measure()
    u = 0.0
    f_est = 0.0

    for k in range(s.n_steps):
        t = k * T
        setpoint = setpoint_at(s.setpoints, t)
        ref = reference.step(setpoint)
        y_star_deriv = ref.derivative(nu)
        e = ref.value - y

        if k % stride == 0:
            window.push(t, y, plant.u_applied)
            try:
                if oracle:
                    f_est = oracle_estimate(plant, controller, alpha, y_star_deriv, e)
                else:
                    try:
                        f_est = estimate_F(window, alpha, nu)
                    except EstimatorNotReady:
                        f_est = 0.0
                u = controller.step(f_est, y_star_deriv, e)
            except ControllerFault as err:
                fault = str(err)
                logger.warning(f"Run '{name}' stopped at t = {t:.3f} s: {fault}")
                break
            window.hold_input(plant.next_input(u))

        held = plant.next_input(u)
        if s.plant == PlantId.NONLINEAR:
            f_true = f_true_nonlinear(plant.x, held, alpha)
            if alpha == 1.0 and not cross_check_warned and not _check_nonlinear_f(plant, held, f_true):
                logger.warning(f"F cross-check failed at t = {t:.3f} s")
                cross_check_warned = True
        else:
            f_true = plant.f_true(alpha, held)

        trace.append(TraceRow(t=t, setpoint=setpoint, y_star=ref.value, y=y, u=u,
                              f_true=f_true, f_est=f_est, e=e, integral_e=controller.integral))
        try:
            y = plant.step(u).y_measured
        except PlantDiverged as err:
            diverged_at = err.t
            logger.warning(f"Run '{name}': {err}")
            break

    return _classify(s, trace, window, diverged_at, fault, name)


def _classify(s: Scenario, trace: List[TraceRow], window: SampledWindow, diverged_at: Optional[float],
              fault: Optional[str], name: str) -> RunResult:
    warmup = (0.0 if s.estimator == "oracle" else window.span) + s.reference_tau
    scale = s.max_abs_setpoint or 1.0

    t = np.array([r.t for r in trace])
    y = np.array([r.y for r in trace])
    e = np.array([r.e for r in trace])
    f_err = np.array([r.f_est - r.f_true for r in trace])

    stable = diverged_at is None and fault is None and len(trace) == s.n_steps
    if stable:
        tail = y[int(len(y) * (1.0 - settings.final_fraction)):]
        stable = bool(np.all(np.isfinite(tail)) and np.max(np.abs(tail)) <= settings.threshold_factor * scale)

    tracking_start = max(warmup, s.duration * (1.0 - settings.tracking_fraction))
    # a truncated run has no meaningful tracking figure
    tracking_rmse = _rmse(e[t >= tracking_start]) if len(trace) == s.n_steps else math.inf
    estimation_rmse = _rmse(f_err[t >= warmup]) if trace else math.nan

    logger.info(f"Run '{name}' finished: stable={stable} tracking_rmse={tracking_rmse:.4g} "
                f"estimation_rmse={estimation_rmse:.4g}")
    return RunResult(scenario=s, trace=trace, stable=stable, tracking_rmse=tracking_rmse,
                     estimation_rmse=estimation_rmse, relative_tracking=tracking_rmse / scale,
                     warmup=warmup, diverged_at=diverged_at, fault=fault, name=name)


def load_preset(name: str) -> Scenario:
    """One of the bundled experiments fig1..fig6."""
    if name not in PRESETS:
        raise ScenarioError(f"Unknown preset '{name}' (expected one of {', '.join(PRESETS)})", keys=["preset"])
    return load_scenario(settings.scenario_dir / f"{name}.yaml")


def scenario_variant(base: Scenario, **changes) -> Scenario:
    """Re-validated copy of a scenario with some fields (or gains) replaced."""
    data = base.model_dump()
    gains = dict(data.pop("gains"))
    for key in ("kp", "ki", "kd", "alpha"):
        if key in changes:
            gains[key] = changes.pop(key)
    data.update(changes)
    data["gains"] = gains
    return Scenario.model_validate(data)


def _parallel(fn, items: Sequence) -> list:
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, settings.sweep_workers)) as pool:
        return list(pool.map(fn, items))


def window_sweep(base: Scenario, windows: Iterable[float]) -> List[RunResult]:
    """The same experiment for several estimator windows, in the given order."""
    variants = [scenario_variant(base, estimator_window=w) for w in windows]
    return _parallel(lambda sc: run_scenario(sc, name=f"tau_w={sc.estimator_window:g}"), variants)


def delay_sweep(kp: float, tau_values: Iterable[float],
                base: Optional[Scenario] = None) -> List[Tuple[float, bool, float]]:
    """(tau, stable, tracking_rmse) per transport delay on the delayed linear plant, ordered as given."""
    base = base or load_preset("fig5")
    taus = [float(tau) for tau in tau_values]
    variants = []
    for tau in taus:
        plant = base.plant
        if tau == 0 and plant == PlantId.LINEAR_DELAYED:
            plant = PlantId.LINEAR
        elif tau > 0 and plant == PlantId.LINEAR:
            plant = PlantId.LINEAR_DELAYED
        variants.append(scenario_variant(base, kp=kp, delay=tau, plant=plant))
    results = _parallel(lambda sc: run_scenario(sc, name=f"delay={sc.delay:g}"), variants)
    for tau, r in zip(taus, results):
        logger.debug(f"delay sweep kp={kp} tau={tau}: stable={r.stable} rmse={r.tracking_rmse:.4g}")
    return [(tau, r.stable, r.tracking_rmse) for tau, r in zip(taus, results)]


def error_dynamics_delay_sweep(kp: float, tau_values: Iterable[float], sample_period: float = 0.01,
                               duration: float = 200.0, alpha: float = 1.0) -> List[Tuple[float, bool]]:
    """
    (tau, stable) for the ideal iP error dynamics e' = -K_P e(t - tau), the loop the
    closed-form delay margin pi/(2 K_P) describes.
    """
    gains = Gains.build(kp, alpha=alpha)
    taus = [float(tau) for tau in tau_values]

    def one(tau: float) -> Tuple[float, bool]:
        _, errors = simulate_error_dynamics(ControllerKind.IP, gains, 1.0, sample_period, duration, tau)
        stable = not error_growing(errors)
        logger.debug(f"error dynamics kp={kp} tau={tau}: stable={stable}")
        return tau, stable

    return _parallel(one, taus)


def stability_boundary(points: Sequence[Tuple]) -> Tuple[Optional[float], Optional[float]]:
    """(last stable tau, first unstable tau) of an ordered delay sweep."""
    last_stable = None
    for point in points:
        tau, stable = point[0], point[1]
        if not stable:
            return last_stable, tau
        last_stable = tau
    return last_stable, None
