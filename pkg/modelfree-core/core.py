"""Shared domain types for modelfree-lab.

Gains, controller kinds, scenarios and the trace record that every other
module produces or consumes. Scenario files are YAML documents whose keys
are exactly the scenario field names (gains are flattened to kp/ki/kd/alpha).
"""

import math
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from settings import settings

logger = logging.getLogger(__name__)


class ModelFreeError(Exception):
    """Base class for every error raised by modelfree-lab."""
    pass


class ScenarioError(ModelFreeError):
    """Raised when a scenario document is missing keys or violates an invariant."""
    def __init__(self, message: str, keys: Optional[List[str]] = None):
        self.keys = keys or []
        super().__init__(message)


class InvalidGainsError(ModelFreeError):
    """Raised when a gain set does not fit the requested controller family."""
    pass


class ControllerKind(str, Enum):
    IP = "iP"
    IPI = "iPI"
    IPD = "iPD"
    IPID = "iPID"

    @classmethod
    def parse(cls, text: str) -> "ControllerKind":
        """Case-insensitive lookup, so 'ipid' from the CLI works."""
        for kind in cls:
            if kind.value.lower() == str(text).strip().lower():
                return kind
        raise ValueError(f"unknown controller '{text}' (expected one of {[k.value for k in cls]})")

    @property
    def nu(self) -> int:
        return 1 if self in (ControllerKind.IP, ControllerKind.IPI) else 2

    @property
    def has_integral(self) -> bool:
        return self in (ControllerKind.IPI, ControllerKind.IPID)

    @property
    def has_derivative(self) -> bool:
        return self in (ControllerKind.IPD, ControllerKind.IPID)


class PlantId(str, Enum):
    NONLINEAR = "nonlinear"
    LINEAR = "linear"
    LINEAR_DELAYED = "linear-delayed"

    @property
    def relative_degree(self) -> int:
        """Order of the first output derivative the input enters directly (y' for all three)."""
        return 1


class Gains(BaseModel):
    """
    Controller gain set plus input scaling alpha and derivation order nu.
    nu is implied by kd (a derivative gain needs the second-order model) and
    is filled in when omitted.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    kp: float
    ki: float = 0.0
    kd: float = 0.0
    alpha: float = 1.0
    nu: int = 1

    @model_validator(mode="before")
    @classmethod
    def _infer_order(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("nu") is None:
            data = dict(data)
            data["nu"] = 2 if float(data.get("kd", 0.0) or 0.0) > 0 else 1
        return data

    @field_validator("kp", "ki", "kd", "alpha")
    @classmethod
    def _finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("gain must be finite")
        return v

    @model_validator(mode="after")
    def _check_invariants(self) -> "Gains":
        if self.kp <= 0:
            raise ValueError("kp must be positive")
        if self.ki < 0:
            raise ValueError("ki must be non-negative")
        if self.kd < 0:
            raise ValueError("kd must be non-negative")
        if self.alpha == 0:
            raise ValueError("alpha must be non-zero")
        if self.nu not in (1, 2):
            raise ValueError("nu must be 1 or 2")
        if self.nu == 1 and self.kd != 0:
            raise ValueError("nu = 1 does not admit a derivative gain")
        if self.nu == 2 and self.kd == 0:
            raise ValueError("nu = 2 requires a derivative gain")
        return self

    @classmethod
    def build(cls, kp: float, ki: float = 0.0, kd: float = 0.0, alpha: float = 1.0,
              nu: Optional[int] = None) -> "Gains":
        """Constructor that reports violations as InvalidGainsError."""
        try:
            return cls(kp=kp, ki=ki, kd=kd, alpha=alpha, nu=nu)
        except ValidationError as e:
            reasons = "; ".join(_error_message(err) for err in e.errors())
            raise InvalidGainsError(f"Invalid gains (kp={kp}, ki={ki}, kd={kd}, alpha={alpha}): {reasons}")

    @property
    def kind(self) -> ControllerKind:
        """The controller family these gains describe."""
        if self.kd > 0:
            return ControllerKind.IPID if self.ki > 0 else ControllerKind.IPD
        return ControllerKind.IPI if self.ki > 0 else ControllerKind.IP


@dataclass(frozen=True, slots=True)
class TraceRow:
    t: float
    setpoint: float
    y_star: float
    y: float
    u: float
    f_true: float
    f_est: float
    e: float
    integral_e: float = 0.0


# Column order of the trace CSV.
TRACE_FIELDS = ("t", "setpoint", "y_star", "y", "u", "f_true", "f_est", "e")

REQUIRED_KEYS = ("plant", "controller", "kp", "sample_period", "estimator_window", "duration")
OPTIONAL_KEYS = ("ki", "kd", "alpha", "nu", "delay", "noise_std", "setpoints", "reference_tau",
                 "seed", "estimator", "t_est_mode", "initial_output")
GAIN_KEYS = ("kp", "ki", "kd", "alpha", "nu")

Setpoints = Tuple[Tuple[float, float], ...]


class Scenario(BaseModel):
    """One closed-loop experiment: plant, controller, sampling and reference configuration."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    plant: PlantId
    controller: ControllerKind
    gains: Gains
    sample_period: float
    estimator_window: float
    delay: float = 0.0
    noise_std: float = 0.0
    duration: float
    setpoints: Setpoints
    reference_tau: float
    seed: int = 0
    estimator: str = "algebraic"
    t_est_mode: str = "window"
    initial_output: float = 0.0

    @field_validator("setpoints")
    @classmethod
    def _check_setpoints(cls, v: Setpoints) -> Setpoints:
        if not v:
            raise ValueError("setpoint schedule must not be empty")
        times = [t for t, _ in v]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("setpoint times must be strictly increasing")
        if not all(math.isfinite(t) and math.isfinite(s) for t, s in v):
            raise ValueError("setpoints must be finite")
        return v

    @field_validator("estimator")
    @classmethod
    def _check_estimator(cls, v: str) -> str:
        if v not in ("algebraic", "oracle"):
            raise ValueError("estimator must be 'algebraic' or 'oracle'")
        return v

    @field_validator("t_est_mode")
    @classmethod
    def _check_t_est_mode(cls, v: str) -> str:
        if v not in ("window", "loop"):
            raise ValueError("t_est_mode must be 'window' or 'loop'")
        return v

    @model_validator(mode="after")
    def _check_invariants(self) -> "Scenario":
        if not self.sample_period > 0:
            raise ValueError("sample_period must be positive")
        if self.estimator_window < self.sample_period:
            raise ValueError("estimator_window must be at least one sample_period")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.delay < 0:
            raise ValueError("delay must be non-negative")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.reference_tau < 0:
            raise ValueError("reference_tau must be non-negative")
        if self.plant == PlantId.LINEAR_DELAYED and self.delay <= 0:
            raise ValueError("plant 'linear-delayed' needs a positive delay")
        if self.controller.nu != self.gains.nu:
            raise ValueError("controller/order mismatch")
        if self.gains.kind != self.controller:
            raise ValueError(f"controller/gains mismatch: gains describe {self.gains.kind.value}")
        return self

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.sample_period))

    @property
    def max_abs_setpoint(self) -> float:
        return max(abs(v) for _, v in self.setpoints)


def setpoint_at(setpoints: Setpoints, t: float) -> float:
    """Value of the piecewise-constant schedule at time t (first value before the first switch)."""
    value = setpoints[0][1]
    for t_switch, v in setpoints:
        if t + 1e-12 >= t_switch:
            value = v
        else:
            break
    return value


# Error locations inside the nested gains model map back to the flat file keys.
def _error_key(err: Dict[str, Any]) -> str:
    loc = err.get("loc", ())
    if loc and loc[0] == "gains" and len(loc) > 1:
        return str(loc[1])
    if loc and loc[0] != "gains":
        return str(loc[0])
    # model-level checks name the key first, e.g. "kp must be positive"
    first = _error_message(err).split(" ")[0].split("/")[0]
    if first in REQUIRED_KEYS + OPTIONAL_KEYS:
        return first
    return "gains" if loc else "scenario"


def _error_message(err: Dict[str, Any]) -> str:
    return str(err.get("msg", "")).removeprefix("Value error, ")


def parse_scenario(text: str) -> Scenario:
    """
    Parses a YAML scenario document into a validated Scenario.
    Every problem is reported as ScenarioError naming the offending key(s).
    """
    try:
        data = yaml.safe_load(text) if text else None
    except yaml.YAMLError as e:
        raise ScenarioError(f"Scenario document is not valid YAML: {e}")
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ScenarioError("Scenario document must be a mapping of key: value entries")

    unknown = sorted(k for k in data if k not in REQUIRED_KEYS + OPTIONAL_KEYS)
    if unknown:
        raise ScenarioError(f"Unknown scenario key(s): {', '.join(unknown)}", keys=unknown)

    missing = [k for k in REQUIRED_KEYS if k not in data]
    if missing:
        raise ScenarioError(f"Missing required key(s): {', '.join(missing)}", keys=missing)

    try:
        controller = ControllerKind.parse(data["controller"])
    except ValueError as e:
        raise ScenarioError(f"controller: {e}", keys=["controller"])

    if data.get("nu") is not None:
        try:
            nu = int(data["nu"])
        except (TypeError, ValueError):
            raise ScenarioError("nu must be 1 or 2", keys=["nu"])
    else:
        nu = controller.nu
    if nu != controller.nu:
        raise ScenarioError(f"controller/order mismatch: {controller.value} needs nu = {controller.nu}, "
                            f"got nu = {data['nu']}", keys=["controller", "nu"])

    try:
        sample_period = float(data["sample_period"])
    except (TypeError, ValueError):
        raise ScenarioError("sample_period must be a number", keys=["sample_period"])
    if not sample_period > 0:
        raise ScenarioError(f"sample_period must be positive, got {sample_period}", keys=["sample_period"])

    setpoints = data.get("setpoints")
    if setpoints is None:
        setpoints = settings.default_setpoints
    try:
        setpoints = tuple((float(t), float(v)) for t, v in setpoints)
    except (TypeError, ValueError):
        raise ScenarioError("setpoints must be a list of [time, value] pairs", keys=["setpoints"])

    payload: Dict[str, Any] = {
        "plant": data["plant"],
        "controller": controller,
        "gains": {k: data[k] for k in GAIN_KEYS if data.get(k) is not None},
        "sample_period": sample_period,
        "estimator_window": data["estimator_window"],
        "duration": data["duration"],
        "setpoints": setpoints,
        "reference_tau": data.get("reference_tau", settings.reference_tau),
    }
    for key in ("delay", "noise_std", "seed", "estimator", "t_est_mode", "initial_output"):
        if data.get(key) is not None:
            payload[key] = data[key]

    try:
        return Scenario.model_validate(payload)
    except ValidationError as e:
        keys = sorted({_error_key(err) for err in e.errors()})
        reasons = "; ".join(f"{_error_key(err)}: {_error_message(err)}" for err in e.errors())
        raise ScenarioError(f"Invalid scenario: {reasons}", keys=keys)


def dump_scenario(scenario: Scenario) -> str:
    """Serialises a Scenario to the flat YAML layout parse_scenario reads."""
    doc = {
        "plant": scenario.plant.value,
        "controller": scenario.controller.value,
        "kp": scenario.gains.kp,
        "ki": scenario.gains.ki,
        "kd": scenario.gains.kd,
        "alpha": scenario.gains.alpha,
        "nu": scenario.gains.nu,
        "sample_period": scenario.sample_period,
        "estimator_window": scenario.estimator_window,
        "delay": scenario.delay,
        "noise_std": scenario.noise_std,
        "duration": scenario.duration,
        "setpoints": [[t, v] for t, v in scenario.setpoints],
        "reference_tau": scenario.reference_tau,
        "seed": scenario.seed,
        "estimator": scenario.estimator,
        "t_est_mode": scenario.t_est_mode,
        "initial_output": scenario.initial_output,
    }
    return yaml.safe_dump(doc, sort_keys=False)


def load_scenario(path) -> Scenario:
    """Reads and parses a scenario file. I/O failures propagate as OSError."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    logger.debug(f"Loaded scenario file {path}")
    return parse_scenario(text)
