import os
import sys
import math
import time

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from core import ControllerKind, Gains, InvalidGainsError
from settings import settings
from margins import (FrequencyDomainError, OpenLoopTF, Unbounded, closed_loop_polynomial, delay_margin,
                     delay_margin_iP, evaluate, integral_gain_for_phase_margin, ipid_crossover_cubic, margins,
                     margins_iP, margins_iPD, margins_iPI, margins_iPID, margins_numeric, nyquist_sample, phase_deg,
                     routh_stable, solve_cubic)


def tf_of(kp, ki=0.0, kd=0.0, delay=0.0):
    gains = Gains.build(kp, ki=ki, kd=kd)
    return OpenLoopTF(kind=gains.kind, gains=gains, delay=delay)


def test_ip_margins():
    report = margins_iP(Gains.build(0.5))
    assert report.phase_margin == 90.0
    assert report.omega_gain_crossover == 0.5
    assert report.gain_margin == Unbounded.INFINITY
    assert report.gain_margin_db == Unbounded.INFINITY


def test_ipi_margins_closed_form():
    report = margins_iPI(Gains.build(1.0, ki=1.0))
    w = math.sqrt((1 + math.sqrt(5)) / 2)
    assert report.omega_gain_crossover == pytest.approx(w, rel=1e-12)
    assert report.phase_margin == pytest.approx(math.degrees(math.atan(w)), abs=1e-10)
    assert report.phase_margin == pytest.approx(51.83, abs=0.01)
    assert report.gain_margin_infinite


def test_ipi_without_integral_gain_is_an_error():
    with pytest.raises(InvalidGainsError):
        margins_iPI(Gains.build(1.0))


def test_ipd_mirrors_ipi():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = rng.uniform(0.05, 20, size=2)
        ipi = margins_iPI(Gains.build(a, ki=b))
        ipd = margins_iPD(Gains.build(b, kd=a))
        assert ipd.phase_margin == pytest.approx(ipi.phase_margin, abs=1e-12)
        assert ipd.omega_gain_crossover == pytest.approx(ipi.omega_gain_crossover, rel=1e-12)


def test_ipid_margins_identities():
    gains = Gains.build(4.0, ki=2.0, kd=3.0)
    report = margins_iPID(gains)
    tf = tf_of(4.0, ki=2.0, kd=3.0)
    assert report.omega_phase_crossover == pytest.approx(math.sqrt(2.0 / 3.0))
    assert report.gain_margin == pytest.approx(2.0 / 12.0)
    assert abs(evaluate(tf, report.omega_gain_crossover)) == pytest.approx(1.0, abs=1e-9)
    assert evaluate(tf, report.omega_phase_crossover).imag == pytest.approx(0.0, abs=1e-12)
    assert report.gain_margin == pytest.approx(1.0 / abs(evaluate(tf, report.omega_phase_crossover)), rel=1e-12)


def test_solve_cubic_three_real_roots():
    # (x - 1)(x - 2)(x - 3)
    np.testing.assert_allclose(solve_cubic(-6.0, 11.0, -6.0), [1.0, 2.0, 3.0], atol=1e-12)


def test_solve_cubic_one_real_root():
    # (x - 2)(x^2 + 1)
    np.testing.assert_allclose(solve_cubic(-2.0, 1.0, -2.0), [2.0], atol=1e-12)


def test_crossover_cubic_roots_are_positive_and_accurate():
    rng = np.random.default_rng(11)
    for _ in range(500):
        kp, ki, kd = 10.0 ** rng.uniform(-2, 2, size=3)
        a2, a1, a0 = ipid_crossover_cubic(Gains.build(kp, ki=ki, kd=kd))
        positive = [x for x in solve_cubic(a2, a1, a0) if x > 0]
        assert positive
        for x in positive:
            residual = x ** 3 + a2 * x * x + a1 * x + a0
            scale = max(abs(x) ** 3, abs(a2 * x * x), abs(a1 * x), abs(a0))
            assert abs(residual) <= 1e-9 * scale


@pytest.mark.parametrize("kp, ki, kd", [
    (1.0, 0.0, 0.0), (10.0, 0.0, 0.0), (1.0, 1.0, 0.0), (2.0, 5.0, 0.0), (1.0, 0.0, 1.0), (3.0, 0.0, 0.5),
    (4.0, 2.0, 3.0), (1.0, 0.5, 2.0),
])
def test_closed_forms_match_the_frequency_sweep(kp, ki, kd):
    tf = tf_of(kp, ki, kd)
    exact = margins(tf)
    swept = margins_numeric(tf)
    assert swept.phase_margin == pytest.approx(exact.phase_margin, abs=1e-6)
    assert swept.omega_gain_crossover == pytest.approx(exact.omega_gain_crossover, rel=1e-6)
    if exact.gain_margin_infinite:
        assert swept.gain_margin_infinite
    else:
        assert swept.gain_margin == pytest.approx(exact.gain_margin, rel=1e-6)


def _random_gains(rng, kind):
    kp = float(10.0 ** rng.uniform(-2, 2))
    ki = float(10.0 ** rng.uniform(-2, 2)) if kind.has_integral else 0.0
    kd = float(10.0 ** rng.uniform(-2, 2)) if kind.has_derivative else 0.0
    return kp, ki, kd


@pytest.mark.parametrize("kind", list(ControllerKind))
def test_closed_forms_match_the_sweep_on_random_gains(kind):
    rng = np.random.default_rng(2024)
    started = time.perf_counter()
    for _ in range(1000):
        tf = tf_of(*_random_gains(rng, kind))
        exact = margins(tf)
        swept = margins_numeric(tf)
        assert len(swept.gain_crossovers) == len(exact.gain_crossovers)
        assert swept.phase_margin == pytest.approx(exact.phase_margin, rel=1e-6, abs=1e-6)
        assert swept.omega_gain_crossover == pytest.approx(exact.omega_gain_crossover, rel=1e-6)
        if exact.gain_margin_infinite:
            assert swept.gain_margin_infinite
        else:
            assert swept.gain_margin == pytest.approx(exact.gain_margin, rel=1e-9)
            assert swept.omega_phase_crossover == pytest.approx(exact.omega_phase_crossover, rel=1e-9)
    assert time.perf_counter() - started < 10.0


def test_complex_pair_near_the_axis_is_not_a_crossover():
    # one real root at ~6246 and a complex pair 0.008737 +- 1.9e-5 j
    gains = Gains.build(0.018632, ki=0.690530, kd=79.03295)
    a2, a1, a0 = ipid_crossover_cubic(gains)
    roots = solve_cubic(a2, a1, a0)
    real = sorted(r.real for r in np.roots([1.0, a2, a1, a0]) if abs(r.imag) < 1e-12 * abs(r))
    np.testing.assert_allclose(roots, real, rtol=1e-10)
    report = margins_iPID(gains)
    assert len(report.gain_crossovers) == 1
    tf = tf_of(gains.kp, gains.ki, gains.kd)
    assert abs(evaluate(tf, report.omega_gain_crossover)) == pytest.approx(1.0, abs=1e-9)
    assert margins_numeric(tf).phase_margin == pytest.approx(report.phase_margin, abs=1e-6)


def _gains_with_crossovers(w1, w2, w3):
    # x^3 + a2 x^2 + a1 x + a0 with roots w^2, matched to -K_D^2, 2 K_D K_I - K_P^2, -K_I^2
    x1, x2, x3 = w1 * w1, w2 * w2, w3 * w3
    kd = math.sqrt(x1 + x2 + x3)
    ki = math.sqrt(x1 * x2 * x3)
    kp_sq = 2.0 * kd * ki - (x1 * x2 + x1 * x3 + x2 * x3)
    assert kp_sq > 0
    return math.sqrt(kp_sq), ki, kd


def test_crossovers_inside_one_grid_cell_are_found():
    lo, hi, n = settings.oracle_grid
    grid = np.geomspace(lo, hi, n)
    i = int(np.searchsorted(grid, 0.1277))
    step = grid[i + 1] / grid[i]
    w1, w2 = grid[i] * step ** 0.35, grid[i] * step ** 0.65
    kp, ki, kd = _gains_with_crossovers(w1, w2, 91.57)
    tf = tf_of(kp, ki, kd)
    exact = margins_iPID(Gains.build(kp, ki=ki, kd=kd))
    np.testing.assert_allclose(exact.gain_crossovers, [w1, w2, 91.57], rtol=1e-6)
    assert exact.phase_margin < 0
    swept = margins_numeric(tf)
    np.testing.assert_allclose(swept.gain_crossovers, exact.gain_crossovers, rtol=1e-9)
    assert swept.phase_margin == pytest.approx(exact.phase_margin, abs=1e-6)


def test_delay_phase_is_exact():
    base = tf_of(2.0, ki=1.0)
    delayed = tf_of(2.0, ki=1.0, delay=0.3)
    w = np.geomspace(0.01, 100, 50)
    np.testing.assert_allclose(phase_deg(base, w) - phase_deg(delayed, w), np.degrees(0.3 * w), atol=1e-9)
    np.testing.assert_allclose(np.abs(evaluate(base, w)), np.abs(evaluate(delayed, w)), rtol=1e-12)


def test_delay_margin_ip():
    assert delay_margin_iP(1.0) == pytest.approx(math.pi / 2)
    assert delay_margin_iP(10.0) == pytest.approx(math.pi / 20)
    with pytest.raises(InvalidGainsError):
        delay_margin_iP(0.0)


def test_delayed_ip_at_its_delay_margin_has_zero_phase_margin():
    report = margins_numeric(tf_of(1.0, delay=math.pi / 2))
    assert report.phase_margin == pytest.approx(0.0, abs=1e-6)
    assert report.gain_margin == pytest.approx(1.0, abs=1e-6)
    assert report.omega_phase_crossover == pytest.approx(1.0, rel=1e-6)


def test_general_delay_margin_agrees_with_ip():
    assert delay_margin(tf_of(3.0)) == pytest.approx(delay_margin_iP(3.0), rel=1e-12)
    tf = tf_of(1.0, ki=1.0)
    report = margins(tf)
    expected = math.radians(report.phase_margin) / report.omega_gain_crossover
    assert delay_margin(tf) == pytest.approx(expected, rel=1e-12)
    assert margins_numeric(tf.model_copy(update={"delay": expected})).phase_margin == pytest.approx(0.0, abs=1e-5)


def test_phase_margin_query():
    kp = 1.5
    ki = integral_gain_for_phase_margin(kp, 45.0)
    assert ki == pytest.approx(math.sqrt(2) * kp * kp)
    report = margins_iPI(Gains.build(kp, ki=ki))
    assert report.phase_margin == pytest.approx(45.0, abs=1e-9)
    assert report.omega_gain_crossover == pytest.approx(ki / kp, rel=1e-12)
    with pytest.raises(InvalidGainsError):
        integral_gain_for_phase_margin(kp, 95.0)


def test_routh_matches_numpy_roots():
    rng = np.random.default_rng(9)
    for _ in range(200):
        kind = ControllerKind(rng.choice(["iP", "iPI", "iPD", "iPID"]))
        kp = float(rng.uniform(0.1, 10))
        ki = float(rng.uniform(0.1, 10)) if kind.has_integral else 0.0
        kd = float(rng.uniform(0.1, 10)) if kind.has_derivative else 0.0
        gains = Gains.build(kp, ki=ki, kd=kd)
        poly = closed_loop_polynomial(kind, gains)
        if kind == ControllerKind.IPID and abs(kd * kp - ki) < 1e-6:
            continue
        assert routh_stable(kind, gains) == bool(np.all(np.roots(poly).real < 0))


def test_evaluate_rejects_non_positive_frequency():
    with pytest.raises(FrequencyDomainError):
        evaluate(tf_of(1.0), 0.0)
    with pytest.raises(FrequencyDomainError):
        evaluate(tf_of(1.0), np.array([1.0, -1.0]))


def test_nyquist_sample_rows():
    rows = nyquist_sample(tf_of(1.0, ki=1.0), 0.1, 10.0, 50)
    assert len(rows) == 50
    assert rows[0].omega == pytest.approx(0.1) and rows[-1].omega == pytest.approx(10.0)
    assert all(a.omega < b.omega for a, b in zip(rows, rows[1:]))
    row = rows[10]
    assert row.gain_db == pytest.approx(20 * math.log10(math.hypot(row.re, row.im)))


@pytest.mark.parametrize("lo, hi, n", [(1.0, 1.0, 10), (0.0, 1.0, 10), (1.0, 10.0, 1)])
def test_nyquist_sample_rejects_bad_ranges(lo, hi, n):
    with pytest.raises(FrequencyDomainError):
        nyquist_sample(tf_of(1.0), lo, hi, n)


def test_mismatched_tf_is_rejected():
    with pytest.raises(ValueError):
        OpenLoopTF(kind=ControllerKind.IPI, gains=Gains.build(1.0))
