import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pilno.optim import (AdamState, LbfgsHistory, OptimizerError, adam_step, clip_grad_norm, global_norm,
                         lbfgs_run, lr_cosine, lr_exponential, strong_wolfe)


def rosenbrock(x):
    a, b = x
    f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
    return f, g


# --- Adam ---

def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    out, st_ = adam_step(p, {"w": np.zeros(2)}, AdamState(), 1e-3)
    assert np.array_equal(out["w"], p["w"]) and st_.step == 1


def test_adam_first_step():
    out, _ = adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, AdamState(), 1e-3)
    assert abs(out["w"][0]) == pytest.approx(1e-3 / (1 + 1e-8), rel=1e-12)


@given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-6))
def test_adam_first_step_sign(g):
    out, _ = adam_step({"w": np.array([0.0])}, {"w": np.array([g])}, AdamState(), 1e-2)
    assert np.sign(out["w"][0]) == -np.sign(g)


def test_adam_bounded_steps():
    rng = np.random.default_rng(0)
    state = AdamState()
    p = {"w": rng.normal(size=10)}
    for _ in range(50):
        new, state = adam_step(p, {"w": rng.normal(size=10) * 100}, state, 1e-2)
        assert np.abs(new["w"] - p["w"]).max() <= 1e-2 * 3.2  # (1-b1)/sqrt(1-b2) bound
        assert (state.v["w"] >= 0).all()
        p = new


def test_adam_rejects_nan_and_bad_lr():
    with pytest.raises(OptimizerError):
        adam_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, AdamState(), 1e-3)
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(1)}, {"w": np.zeros(1)}, AdamState(), 0.0)


# --- schedules ---

def test_cosine_examples():
    assert lr_cosine(0, 100, 1e-3, 1e-5) == 1e-3
    assert lr_cosine(50, 100, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-15)
    assert lr_cosine(100, 100, 1e-3, 1e-5) == 1e-3


@given(st.integers(0, 10 ** 6), st.integers(1, 5000))
def test_cosine_range(step, period):
    assert 1e-5 <= lr_cosine(step, period, 1e-3, 1e-5) <= 1e-3


def test_exponential_examples():
    assert lr_exponential(0, 1e-3, 0.95, 100) == 1e-3
    assert lr_exponential(99, 1e-3, 0.95, 100) == 1e-3
    assert lr_exponential(1700, 1e-3, 0.95, 100) == pytest.approx(1e-3 * 0.95 ** 17, rel=1e-15)
    assert abs(lr_exponential(1700, 1e-3, 0.95, 100) - 4.30e-4) / 4.30e-4 <= 0.05
    with pytest.raises(ValueError):
        lr_exponential(0, 1e-3, 1.5, 10)
    with pytest.raises(ValueError):
        lr_cosine(0, 0, 1e-3, 1e-5)


# --- clipping ---

def test_clip_examples():
    out = clip_grad_norm({"g": np.array([3.0, 4.0])}, 1.0)
    np.testing.assert_allclose(out["g"], [0.6, 0.8])
    small = {"g": np.array([0.1, 0.2])}
    assert np.array_equal(clip_grad_norm(small, 1.0)["g"], small["g"])
    assert not clip_grad_norm({"g": np.zeros(3)}, 1.0)["g"].any()


@settings(max_examples=50)
@given(st.integers(0, 10 ** 6), st.floats(1e-3, 10))
def test_clip_property(seed, tau):
    rng = np.random.default_rng(seed)
    g = {"a": rng.normal(size=5) * 10, "b": rng.normal(size=(2, 3))}
    out = clip_grad_norm(g, tau)
    assert global_norm(out) <= tau + 1e-12
    if global_norm(g) > tau:  # direction preserved
        ratio = out["a"] / g["a"]
        np.testing.assert_allclose(ratio, ratio[0], rtol=1e-12)


# --- L-BFGS ---

def test_lbfgs_quadratic_two_iterations():
    x0 = np.array([3.0, -4.0, 1.5])
    res = lbfgs_run(lambda x: (0.5 * x @ x, x.copy()), x0, max_iters=2, grad_tol=0.0)
    assert np.linalg.norm(res.x) <= 1e-10


def test_lbfgs_rosenbrock():
    res = lbfgs_run(rosenbrock, np.array([-1.2, 1.0]), max_iters=100)
    assert res.f <= 1e-8
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))
    assert all(float(y @ s) > 0 for s, y in zip(res.history.s_list, res.history.y_list))


def test_gradient_descent_baseline_is_much_slower():
    x = np.array([-1.2, 1.0])
    for _ in range(100):
        x = x - 1e-3 * rosenbrock(x)[1]
    assert rosenbrock(x)[0] > 1e-2


def test_history_rejects_negative_curvature_and_caps_length():
    h = LbfgsHistory(m=3)
    assert not h.push(np.array([1.0, 0.0]), np.array([-1.0, 0.0]))
    for i in range(5):
        assert h.push(np.array([1.0, i]), np.array([2.0, i]))
    assert len(h.s_list) == len(h.y_list) == 3


def test_line_search_failure_returns_status_not_exception():
    # gradient lies: claims descent but the function only increases
    def fun(x):
        return float(x[0] ** 2 + 1.0), np.array([-1.0])

    res = lbfgs_run(fun, np.array([1.0]), max_iters=10)
    assert res.status == "line_search_failed"
    assert res.f <= 2.0


def test_lbfgs_nonfinite_objective_is_survived():
    def fun(x):
        if x[0] > 2.0:
            return math.inf, np.zeros(1)
        return float((x[0] - 1.5) ** 2), np.array([2 * (x[0] - 1.5)])

    res = lbfgs_run(fun, np.array([-10.0]), max_iters=50)
    assert abs(res.x[0] - 1.5) < 1e-6


def test_strong_wolfe_conditions_hold():
    f0, g0 = 1.0, -2.0

    def phi(a):  # (a - 1)^2 shifted so phi(0) = 1, phi'(0) = -2
        return (a - 1.0) ** 2, 2.0 * (a - 1.0)

    a, fa, ga, ok, _ = strong_wolfe(phi, f0, g0, 3.0)
    assert ok
    assert fa <= f0 + 1e-4 * a * g0
    assert abs(ga) <= 0.9 * abs(g0)
