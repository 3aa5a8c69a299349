import os
import sys
import math

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from estimator import (EstimatorNotReady, SampledWindow, continuum_estimate, estimate_F, estimator_weights,
                       f_true_nonlinear, f_true_nonlinear_display)


def filled_window(y_fn, u_fn, t_end, span, period):
    window = SampledWindow(span, period)
    n = window.capacity
    for i in range(n):
        t = t_end - (n - 1 - i) * period
        window.push(t, y_fn(t), u_fn(t))
    return window


def test_window_capacity_and_clamp():
    assert SampledWindow(1.0, 0.01).capacity == 101
    narrow = SampledWindow(0.01, 0.01)
    assert narrow.capacity == 3
    assert narrow.span == pytest.approx(0.02)
    with pytest.raises(ValueError):
        SampledWindow(0.0, 0.01)


def test_window_requires_even_spacing():
    window = SampledWindow(0.05, 0.01)
    window.push(0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        window.push(0.03, 0.0, 0.0)


def test_not_ready_until_full():
    window = SampledWindow(0.05, 0.01)
    for k in range(window.capacity - 1):
        window.push(k * 0.01, 1.0, 0.0)
        with pytest.raises(EstimatorNotReady):
            estimate_F(window, 1.0)
    window.push((window.capacity - 1) * 0.01, 1.0, 0.0)
    assert estimate_F(window, 1.0) == pytest.approx(0.0, abs=1e-12)


def test_weight_moments():
    for nu in (1, 2):
        c, g = estimator_weights(41, 0.4, nu)
        sigma = np.linspace(0, 0.4, 41)
        assert c.sum() == pytest.approx(0.0, abs=1e-9)
        assert g.sum() == pytest.approx(1.0, abs=1e-12)
        if nu == 1:
            assert c @ sigma == pytest.approx(1.0, abs=1e-9)
        else:
            assert c @ sigma == pytest.approx(0.0, abs=1e-8)
            assert c @ (sigma ** 2 / 2) == pytest.approx(1.0, abs=1e-8)


def test_constant_output_is_annihilated():
    window = filled_window(lambda t: 3.7, lambda t: 0.0, 5.0, 0.5, 0.01)
    assert estimate_F(window, 1.0) == pytest.approx(0.0, abs=1e-12)


def test_exact_on_affine_output_with_constant_input():
    # y = a t + b, u = c  =>  F = a - alpha c
    a, b, c, alpha = 2.5, -1.0, 0.4, 1.3
    for span in (0.02, 0.05, 1.0, 10.0):
        window = filled_window(lambda t: a * t + b, lambda t: c, 12.0, span, 0.01)
        assert estimate_F(window, alpha) == pytest.approx(a - alpha * c, abs=1e-10)


def test_second_order_exact_on_quadratic_output():
    # y = q t^2 / 2 + a t + b, u = c  =>  F = q - alpha c
    q, a, b, c, alpha = -1.5, 0.3, 2.0, 0.7, 2.0
    window = filled_window(lambda t: q * t * t / 2 + a * t + b, lambda t: c, 3.0, 0.2, 0.01)
    assert estimate_F(window, alpha, nu=2) == pytest.approx(q - alpha * c, abs=1e-7)


def test_matches_the_continuum_integral_and_converges():
    span, t_end, alpha = 0.5, 2.0, 1.0
    y_fn, u_fn = math.sin, math.cos
    exact = continuum_estimate(y_fn, u_fn, t_end, span, alpha)
    errors = []
    periods = (0.02, 0.01, 0.005, 0.0025)
    for h in periods:
        window = filled_window(y_fn, u_fn, t_end, span, h)
        errors.append(abs(estimate_F(window, alpha) - exact))
    orders = [math.log2(e0 / e1) for e0, e1 in zip(errors, errors[1:])]
    assert min(orders) >= 1.8
    assert errors[-1] < 1e-3


def test_continuum_estimate_recovers_derivative_for_smooth_data():
    # with u = 0 the estimate is a smooth average of y', centred on the window
    exact = continuum_estimate(math.sin, lambda t: 0.0, 1.0, 0.01, 1.0)
    assert exact == pytest.approx(math.cos(0.995), abs=1e-4)


def test_f_true_forms_agree():
    rng = np.random.default_rng(2)
    for _ in range(100):
        x1, x2, u = rng.normal(size=3)
        y = 2 * x1 + x2
        y_ddot = 6 * x1 + 5 * x2 - 2 * u ** 3
        assert f_true_nonlinear((x1, x2), u) == pytest.approx(f_true_nonlinear_display(y, y_ddot, u, 0.0),
                                                              abs=1e-12)


def test_newest_input_can_be_set_after_the_control_step():
    window = SampledWindow(0.02, 0.01)
    for k in range(3):
        window.push(k * 0.01, 0.0, 0.0)
    window.hold_input(4.0)
    y, u = window.arrays()
    assert list(u) == [0.0, 0.0, 4.0]
    # the newest input has no weight in the estimate
    assert estimate_F(window, 1.0) == 0.0
    _, g = estimator_weights(window.capacity, window.span)
    assert g[-1] == 0.0 and g[0] == 0.0


def test_three_sample_window_weighs_only_the_middle_input():
    # y' = F + alpha u with u switching at the middle sample
    window = SampledWindow(0.01, 0.01)
    F, alpha = 0.4, 1.0
    window.push(0.0, 0.0, 1.0)
    window.push(0.01, 0.01 * (F + alpha * 1.0), 2.0)
    window.push(0.02, 0.01 * (F + alpha * 1.0) + 0.01 * (F + alpha * 2.0), 0.0)
    c, g = estimator_weights(3, 0.02)
    np.testing.assert_allclose(c, [-50.0, 0.0, 50.0], atol=1e-9)
    np.testing.assert_allclose(g, [0.0, 1.0, 0.0], atol=1e-15)
    assert estimate_F(window, alpha) == pytest.approx(F + 0.5 * (1.0 - 2.0), abs=1e-9)
