"""Open-loop transfer functions and stability margins of the intelligent controllers.

Closing an ultra-local model y^(nu) = F + alpha*u with an intelligent controller
leaves the error dynamics e^(nu) + Fr(e) = F_est - F, whose loop gain is one
of four families (optionally times a transport delay e^{-tau s}):

    iP    T = K_P/s
    iPI   T = K_P/s + K_I/s^2
    iPD   T = K_D/s + K_P/s^2
    iPID  T = K_D/s + K_P/s^2 + K_I/s^3

The margins of the undelayed families have closed forms (the iPID gain
crossover is the positive real root of a cubic in omega^2, solved with
Cardano's method). margins_numeric is an independent frequency-sweep oracle
that handles every family, delayed or not.

Gain margins are linear (dB available through gain_margin_db); "no phase
crossover" is reported as Unbounded.INFINITY, never as a large number.
"""

import cmath
import math
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.optimize import brentq, minimize_scalar

from core import ControllerKind, Gains, InvalidGainsError, ModelFreeError
from settings import settings

logger = logging.getLogger(__name__)

__all__ = ['OpenLoopTF', 'MarginReport', 'Unbounded', 'evaluate', 'phase_deg', 'margins',
           'margins_iP', 'margins_iPI', 'margins_iPD', 'margins_iPID', 'margins_numeric',
           'solve_cubic', 'delay_margin_iP', 'delay_margin', 'integral_gain_for_phase_margin',
           'closed_loop_polynomial', 'routh_stable', 'nyquist_sample', 'NyquistRow', 'NYQUIST_FIELDS',
           'FrequencyDomainError', 'crossover_summary', 'ipid_crossover_cubic']


class FrequencyDomainError(ModelFreeError):
    """Raised for frequencies or sweep ranges outside omega > 0."""
    pass


class Unbounded(str, Enum):
    INFINITY = "+inf"


class OpenLoopTF(BaseModel):
    """Loop gain of one controller family, optionally with an input delay (seconds)."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: ControllerKind
    gains: Gains
    delay: float = 0.0

    @model_validator(mode="after")
    def _check(self) -> "OpenLoopTF":
        if not (self.delay >= 0 and math.isfinite(self.delay)):
            raise ValueError("delay must be finite and non-negative")
        if self.gains.kind != self.kind:
            raise ValueError(f"gains describe {self.gains.kind.value}, not {self.kind.value}")
        return self

    def coefficients(self) -> Dict[int, float]:
        """Map power k -> coefficient c_k of T(s) = sum c_k / s^k (delay excluded)."""
        g = self.gains
        if self.kind == ControllerKind.IP:
            return {1: g.kp}
        if self.kind == ControllerKind.IPI:
            return {1: g.kp, 2: g.ki}
        if self.kind == ControllerKind.IPD:
            return {1: g.kd, 2: g.kp}
        return {1: g.kd, 2: g.kp, 3: g.ki}

    def without_delay(self) -> "OpenLoopTF":
        return OpenLoopTF(kind=self.kind, gains=self.gains)


class MarginReport(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    gain_margin: Union[Unbounded, float]
    phase_margin: Optional[float] = None        # degrees
    omega_gain_crossover: Optional[float] = None
    omega_phase_crossover: Optional[float] = None
    gain_crossovers: Tuple[float, ...] = ()
    phase_crossovers: Tuple[float, ...] = ()
    note: str = ""

    @property
    def gain_margin_infinite(self) -> bool:
        return self.gain_margin == Unbounded.INFINITY

    @property
    def gain_margin_db(self) -> Union[Unbounded, float]:
        if self.gain_margin_infinite:
            return Unbounded.INFINITY
        return 20.0 * math.log10(self.gain_margin)


@dataclass(frozen=True)
class NyquistRow:
    omega: float
    re: float
    im: float
    gain_db: float
    phase_deg: float


NYQUIST_FIELDS = ("omega", "re", "im", "gain_db", "phase_deg")


def _require_kind(gains: Gains, kind: ControllerKind) -> None:
    if gains.kind != kind:
        hint = ""
        if kind == ControllerKind.IPI and gains.kind == ControllerKind.IP:
            hint = " (ki = 0: use margins_iP)"
        elif kind == ControllerKind.IPD and gains.kind == ControllerKind.IP:
            hint = " (kd = 0: use margins_iP)"
        raise InvalidGainsError(f"gains describe {gains.kind.value}, not {kind.value}{hint}")


def _check_omega(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=float)
    if w.size == 0 or not np.all(w > 0):
        raise FrequencyDomainError(f"omega must be > 0 (all four families are singular at 0), got {omega}")
    return w


def evaluate(tf: OpenLoopTF, omega):
    """T(j*omega) including the e^{-j omega tau} factor. Scalar in, complex out; arrays broadcast."""
    w = _check_omega(omega)
    s = 1j * w
    value = sum(c / s ** k for k, c in tf.coefficients().items())
    if tf.delay > 0:
        value = value * np.exp(-1j * w * tf.delay)
    if np.ndim(omega) == 0:
        return complex(value)
    return value


def phase_deg(tf: OpenLoopTF, omega):
    """
    Continuous phase of T(j*omega) in degrees. The rational part always has a
    negative real part or lies on the negative imaginary axis, so its phase is
    taken in (-270, -90]; the delay then subtracts omega*tau.
    """
    w = _check_omega(omega)
    rational = evaluate(tf.without_delay(), w)
    phase = np.angle(rational, deg=True)
    phase = np.where(phase > 0, phase - 360.0, phase)
    phase = phase - np.degrees(w * tf.delay)
    if np.ndim(omega) == 0:
        return float(phase)
    return phase


def _pi_like(c1: float, c2: float) -> Tuple[float, float]:
    """Gain crossover and phase margin of T = c1/s + c2/s^2 (c1, c2 > 0)."""
    omega_m = math.sqrt((c1 ** 2 + math.sqrt(c1 ** 4 + 4.0 * c2 ** 2)) / 2.0)
    pm = math.degrees(math.atan(c1 * omega_m / c2))
    return omega_m, pm


def margins_iP(gains: Gains) -> MarginReport:
    """T = K_P/s: phase -90 deg everywhere, so PM = 90 deg, GM infinite, crossover at K_P."""
    _require_kind(gains, ControllerKind.IP)
    return MarginReport(gain_margin=Unbounded.INFINITY, phase_margin=90.0,
                        omega_gain_crossover=gains.kp, gain_crossovers=(gains.kp,),
                        note="no phase crossover: phase is -90 deg at every frequency")


def margins_iPI(gains: Gains) -> MarginReport:
    _require_kind(gains, ControllerKind.IPI)
    omega_m, pm = _pi_like(gains.kp, gains.ki)
    return MarginReport(gain_margin=Unbounded.INFINITY, phase_margin=pm,
                        omega_gain_crossover=omega_m, gain_crossovers=(omega_m,),
                        note="no phase crossover: imaginary part is -K_P/omega")


def margins_iPD(gains: Gains) -> MarginReport:
    """iPD loop = iPI loop with K_D on 1/s and K_P on 1/s^2."""
    _require_kind(gains, ControllerKind.IPD)
    omega_m, pm = _pi_like(gains.kd, gains.kp)
    return MarginReport(gain_margin=Unbounded.INFINITY, phase_margin=pm,
                        omega_gain_crossover=omega_m, gain_crossovers=(omega_m,),
                        note="no phase crossover: imaginary part is -K_D/omega")


def solve_cubic(a2: float, a1: float, a0: float) -> List[float]:
    """
    Real roots of x^3 + a2 x^2 + a1 x + a0 = 0 by Cardano's method, sorted.

    Only the largest real root is taken from Cardano: the depressed cubic
    t^3 + p t + q (x = t - a2/3) gives it from real cube roots when
    (q/2)^2 + (p/3)^3 > 0 and from the trigonometric form otherwise, and it is
    the one root whose branch the sign of the discriminant cannot get wrong.
    The other two come from the deflated quadratic. Every root is polished by
    Newton on the original cubic and dropped unless its residual is below
    1e-9 of the largest term, so a complex pair close to the real axis never
    shows up as two spurious real roots.
    """
    shift = a2 / 3.0
    p = a1 - a2 * a2 / 3.0
    q = 2.0 * a2 ** 3 / 27.0 - a2 * a1 / 3.0 + a0
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3

    if disc > 0:
        a = -q / 2.0
        u = float(np.cbrt(a + math.copysign(math.sqrt(disc), a)))
        v = -p / (3.0 * u) if u != 0 else 0.0
        largest = u + v - shift
    elif p == 0:
        largest = -shift
    else:
        r = 2.0 * math.sqrt(-p / 3.0)
        arg = (3.0 * q / (2.0 * p)) * math.sqrt(-3.0 / p)
        largest = r * math.cos(math.acos(max(-1.0, min(1.0, arg))) / 3.0) - shift
    largest = _newton_cubic(a2, a1, a0, largest)

    # x^3 + a2 x^2 + a1 x + a0 = (x - largest)(x^2 + b1 x + b0)
    b1 = a2 + largest
    b0 = -a0 / largest if largest != 0 else a1 + largest * b1
    d = b1 * b1 - 4.0 * b0
    if d >= 0:
        half = -0.5 * (b1 + math.copysign(math.sqrt(d), b1))
        others = [half, b0 / half] if half != 0 else [0.0]
    else:
        # complex pair; kept only if it touches the axis to working precision
        others = [-0.5 * b1]

    roots = [largest] + [_newton_cubic(a2, a1, a0, x) for x in others]
    real = [x for x in roots if _cubic_residual(a2, a1, a0, x) <= 1e-9] or [largest]
    unique: List[float] = []
    for x in sorted(real):
        if not unique or abs(x - unique[-1]) > 1e-12 * max(1.0, abs(x)):
            unique.append(x)
    return unique


def _cubic_residual(a2: float, a1: float, a0: float, x: float) -> float:
    """|f(x)| relative to the largest of the four terms."""
    f = ((x + a2) * x + a1) * x + a0
    scale = max(abs(x) ** 3, abs(a2 * x * x), abs(a1 * x), abs(a0))
    return abs(f) / scale if scale > 0 else abs(f)


def _newton_cubic(a2: float, a1: float, a0: float, x: float, max_iter: int = 50) -> float:
    best, best_res = x, _cubic_residual(a2, a1, a0, x)
    for _ in range(max_iter):
        f = ((x + a2) * x + a1) * x + a0
        df = (3.0 * x + 2.0 * a2) * x + a1
        if df == 0 or not math.isfinite(df):
            break
        step = f / df
        x -= step
        res = _cubic_residual(a2, a1, a0, x)
        if res < best_res:
            best, best_res = x, res
        if abs(step) <= 4 * np.finfo(float).eps * max(1.0, abs(x)):
            break
    return best


def ipid_crossover_cubic(gains: Gains) -> Tuple[float, float, float]:
    """
    Coefficients (a2, a1, a0) of x^3 + a2 x^2 + a1 x + a0 whose positive roots are
    omega_m^2 for the iPID loop: |T(j w)| = 1 cleared of denominators gives
    w^6 - K_D^2 w^4 + (2 K_D K_I - K_P^2) w^2 - K_I^2 = 0.
    """
    return (-gains.kd ** 2, 2.0 * gains.kd * gains.ki - gains.kp ** 2, -gains.ki ** 2)


def margins_iPID(gains: Gains) -> MarginReport:
    _require_kind(gains, ControllerKind.IPID)
    kp, ki, kd = gains.kp, gains.ki, gains.kd

    roots = [x for x in solve_cubic(*ipid_crossover_cubic(gains)) if x > 0]
    # the cubic is -K_I^2 < 0 at x = 0 and grows without bound, so a positive root exists
    omegas = sorted(math.sqrt(x) for x in roots)
    pms = [math.degrees(math.atan((kd * w * w - ki) / (kp * w))) for w in omegas]
    worst = int(np.argmin(pms))

    omega_pi = math.sqrt(ki / kd)
    return MarginReport(gain_margin=ki / (kd * kp), phase_margin=pms[worst],
                        omega_gain_crossover=omegas[worst], omega_phase_crossover=omega_pi,
                        gain_crossovers=tuple(omegas), phase_crossovers=(omega_pi,),
                        note="" if len(omegas) == 1 else f"{len(omegas)} gain crossovers; worst reported")


def margins(tf: OpenLoopTF) -> MarginReport:
    """Closed form for the undelayed families, frequency-sweep oracle once a delay is present."""
    if tf.delay > 0:
        return margins_numeric(tf)
    return {
        ControllerKind.IP: margins_iP,
        ControllerKind.IPI: margins_iPI,
        ControllerKind.IPD: margins_iPD,
        ControllerKind.IPID: margins_iPID,
    }[tf.kind](tf.gains)


def _sign_change_brackets(values: np.ndarray) -> np.ndarray:
    signs = np.sign(values)
    return np.where(signs[:-1] * signs[1:] <= 0)[0]


def _dip_indices(values: np.ndarray) -> np.ndarray:
    """Interior grid points where |v| has a local minimum but v keeps its sign on both sides."""
    mag = np.abs(values)
    signs = np.sign(values)
    inner = np.arange(1, len(values) - 1)
    is_min = (mag[inner] <= mag[inner - 1]) & (mag[inner] <= mag[inner + 1])
    same_sign = (signs[inner - 1] == signs[inner]) & (signs[inner + 1] == signs[inner]) & (signs[inner] != 0)
    return inner[is_min & same_sign]


def _crossings(fn, grid: np.ndarray, values: np.ndarray, rtol: float) -> List[float]:
    """
    Zeros of fn over the grid range: one brentq per sign change, plus pairs of
    zeros hiding inside a single grid cell, found by pushing each dip of |fn|
    to its extremum with minimize_scalar and bracketing on both sides of it.
    """
    def root(a, b):
        if fn(a) == 0:
            return a
        if fn(b) == 0:
            return b
        return brentq(fn, a, b, xtol=1e-300, rtol=rtol, maxiter=200)

    found = [root(grid[i], grid[i + 1]) for i in _sign_change_brackets(values)]
    for i in _dip_indices(values):
        a, b = float(grid[i - 1]), float(grid[i + 1])
        side = math.copysign(1.0, values[i])
        best = minimize_scalar(lambda x: side * fn(math.exp(x)), bounds=(math.log(a), math.log(b)),
                               method="bounded", options={"xatol": 1e-12})
        w = min(max(math.exp(best.x), a), b)
        dipped = side * fn(w)
        if dipped == 0:
            found.append(w)
        elif dipped < 0:
            found.extend([root(a, w), root(w, b)])
    return sorted(set(found))


def margins_numeric(tf: OpenLoopTF, omega_range: Optional[Tuple[float, float]] = None,
                    tolerance: Optional[float] = None, points: Optional[int] = None) -> MarginReport:
    """
    Frequency-sweep oracle: brackets sign changes of log|T| - 0 (gain crossovers)
    and of Im T (phase crossovers, kept where Re T < 0) on a log grid, then refines
    each bracket with brentq. Pairs of crossovers closer than one grid cell are
    caught from the dips of |log|T|| and |Im T| between grid points. Reports the smallest phase margin and the smallest
    gain margin; every crossover found is listed.
    """
    lo, hi, n = settings.oracle_grid
    if omega_range is not None:
        lo, hi = omega_range
    if points is not None:
        n = points
    tolerance = settings.oracle_tolerance if tolerance is None else tolerance
    if not (lo > 0 and hi > lo):
        raise FrequencyDomainError(f"omega_range must satisfy 0 < min < max, got ({lo}, {hi})")
    if not tolerance > 0:
        raise FrequencyDomainError(f"tolerance must be positive, got {tolerance}")
    rtol = max(tolerance, 4 * np.finfo(float).eps)

    grid = np.geomspace(lo, hi, n)
    on_grid = evaluate(tf, grid)
    coeffs = list(tf.coefficients().items())
    tau = tf.delay

    # scalar closures for the root finder; plain complex arithmetic keeps brentq cheap
    def value(w):
        s = 1j * w
        v = sum(c / s ** k for k, c in coeffs)
        return v * cmath.exp(-1j * w * tau) if tau > 0 else v

    def log_mag(w):
        return math.log(abs(value(w)))

    def imag(w):
        return value(w).imag

    gain_x = _crossings(log_mag, grid, np.log(np.abs(on_grid)), rtol)
    phase_x = [w for w in _crossings(imag, grid, on_grid.imag, rtol) if value(w).real < 0]

    notes = []
    if gain_x:
        pms = [180.0 + float(p) for p in phase_deg(tf, np.array(gain_x))]
        worst = int(np.argmin(pms))
        pm, omega_m = pms[worst], gain_x[worst]
    else:
        pm, omega_m = None, None
        notes.append(f"no gain crossover in [{lo:g}, {hi:g}] rad/s")

    if phase_x:
        gms = [1.0 / abs(value(w)) for w in phase_x]
        best = int(np.argmin(gms))
        gm, omega_pi = gms[best], phase_x[best]
    else:
        gm, omega_pi = Unbounded.INFINITY, None
        notes.append(f"no phase crossover in [{lo:g}, {hi:g}] rad/s")

    logger.debug(f"margins_numeric({tf.kind.value}, delay={tf.delay}): "
                 f"{len(gain_x)} gain / {len(phase_x)} phase crossovers")
    return MarginReport(gain_margin=gm, phase_margin=pm, omega_gain_crossover=omega_m,
                        omega_phase_crossover=omega_pi, gain_crossovers=tuple(gain_x),
                        phase_crossovers=tuple(phase_x), note="; ".join(notes))


def delay_margin_iP(kp: float) -> float:
    """Largest input delay keeping K_P e^{-tau s}/s stable: the phase hits -180 deg at omega = K_P."""
    if not kp > 0:
        raise InvalidGainsError(f"kp must be positive, got {kp}")
    return math.pi / (2.0 * kp)


def delay_margin(tf: OpenLoopTF) -> float:
    """
    Delay margin of an undelayed loop: min over gain crossovers of PM/omega (PM in radians).
    Zero when some crossover already has a non-positive phase margin.
    """
    base = tf.without_delay()
    report = margins(base)
    if not report.gain_crossovers:
        return math.inf
    taus = []
    for w in report.gain_crossovers:
        pm = math.radians(180.0 + phase_deg(base, w))
        taus.append(max(pm, 0.0) / w)
    return min(taus)


def integral_gain_for_phase_margin(kp: float, phase_margin: float = 45.0) -> float:
    """
    iPI integral gain that puts the phase margin at the requested value.
    From tan(PM) = K_P w/K_I and w^4 - K_P^2 w^2 - K_I^2 = 0:
    w = K_P/sin(PM) and K_I = K_P^2 cos(PM)/sin^2(PM); 45 deg gives K_I = sqrt(2) K_P^2
    and w = K_I/K_P. With (K_D, K_P) in place of (K_P, K_I) it answers the iPD question.
    """
    if not kp > 0:
        raise InvalidGainsError(f"kp must be positive, got {kp}")
    if not 0.0 < phase_margin < 90.0:
        raise InvalidGainsError(f"target phase margin must lie in (0, 90) degrees, got {phase_margin}")
    phi = math.radians(phase_margin)
    return kp * kp * math.cos(phi) / math.sin(phi) ** 2


def closed_loop_polynomial(kind: ControllerKind, gains: Gains) -> np.ndarray:
    """Characteristic polynomial of e^(nu) + Fr(e) = 0, highest power first."""
    if kind == ControllerKind.IP:
        return np.array([1.0, gains.kp])
    if kind == ControllerKind.IPI:
        return np.array([1.0, gains.kp, gains.ki])
    if kind == ControllerKind.IPD:
        return np.array([1.0, gains.kd, gains.kp])
    return np.array([1.0, gains.kd, gains.kp, gains.ki])


def routh_stable(kind: ControllerKind, gains: Gains) -> bool:
    """Routh test; up to second order positive coefficients suffice, the cubic also needs K_D K_P > K_I."""
    coeffs = closed_loop_polynomial(kind, gains)
    if np.any(coeffs <= 0):
        return False
    if len(coeffs) == 4:
        return coeffs[1] * coeffs[2] > coeffs[0] * coeffs[3]
    return True


def nyquist_sample(tf: OpenLoopTF, omega_min: float, omega_max: float, n_points: int) -> List[NyquistRow]:
    """Log-spaced frequency response rows ordered by omega."""
    if not (omega_min > 0 and omega_max > omega_min):
        raise FrequencyDomainError(f"empty or invalid frequency range [{omega_min}, {omega_max}]")
    if n_points < 2:
        raise FrequencyDomainError(f"n_points must be at least 2, got {n_points}")
    w = np.geomspace(omega_min, omega_max, int(n_points))
    values = evaluate(tf, w)
    gain_db = 20.0 * np.log10(np.abs(values))
    phase = phase_deg(tf, w)
    return [NyquistRow(float(wi), float(v.real), float(v.imag), float(g), float(p))
            for wi, v, g, p in zip(w, values, gain_db, phase)]


def crossover_summary(report: MarginReport) -> Dict[str, object]:
    """Flat dict for printing / JSON output."""
    return {
        "gain_margin": report.gain_margin.value if report.gain_margin_infinite else report.gain_margin,
        "gain_margin_db": (report.gain_margin_db.value if report.gain_margin_infinite
                           else report.gain_margin_db),
        "phase_margin_deg": report.phase_margin,
        "omega_gain_crossover": report.omega_gain_crossover,
        "omega_phase_crossover": report.omega_phase_crossover,
        "gain_crossovers": list(report.gain_crossovers),
        "phase_crossovers": list(report.phase_crossovers),
        "note": report.note,
    }
