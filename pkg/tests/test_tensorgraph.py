import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pilno import tensorgraph as tg


def fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


# --- gelu ---

def test_gelu_values():
    assert tg.gelu(0.0).value == 0.0
    ref = float(mpmath.mpf(1) * mpmath.ncdf(1))
    assert abs(float(tg.gelu(1.0).value) - ref) <= 1e-10
    assert abs(float(tg.gelu(1.0).value) - 0.8413447461) <= 1e-10
    assert abs(float(tg.gelu(-30.0).value)) < 1e-12


@pytest.mark.parametrize("x", [-8.0, -3.3, -1.0, -0.2, 0.0, 0.7, 2.5, 9.0])
def test_gelu_matches_mpmath(x):
    ref = float(mpmath.mpf(x) * mpmath.ncdf(x))
    assert abs(float(tg.gelu(x).value) - ref) <= 1e-10


@given(st.floats(-50, 50))
def test_gelu_bounds(x):
    y = float(tg.gelu(x).value)
    if x <= 0:
        assert x <= y <= 0
    else:
        assert 0 <= y <= x


def test_gelu_gradient_at_zero():
    x = tg.leaf(0.0)
    (g,) = tg.gradients(tg.gelu(x), [x])
    assert g == pytest.approx(0.5, abs=1e-15)


def test_gelu_prime_matches_fd():
    x0 = np.linspace(-4, 4, 17)
    x = tg.leaf(x0)
    (g,) = tg.gradients(tg.mean(tg.gelu_prime(x)), [x])
    fd = fd_grad(lambda v: float(np.mean(tg.gelu_prime(v).value)), x0)
    assert rel_err(g, fd) <= 1e-7


# --- layer norm ---

def test_layer_norm_examples():
    np.testing.assert_allclose(tg.layer_norm(np.array([5.0, 5.0, 5.0])).value, 0.0, atol=0)
    np.testing.assert_allclose(tg.layer_norm(np.array([1.0, 3.0]), eps=1e-14).value, [-1.0, 1.0], atol=1e-12)
    z = np.array([1.0, -1.0, 1.0, -1.0])
    out = tg.layer_norm(z, eps=1e-5).value
    np.testing.assert_allclose(out, z * math.sqrt(1.0 / (1.0 + 1e-5)), rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_layer_norm_moments(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(3, 7)) * rng.uniform(0.1, 10)
    out = tg.layer_norm(v, 1e-5).value
    assert np.abs(out.mean(axis=-1)).max() <= 1e-12
    assert (out.var(axis=-1) <= 1.0 + 1e-12).all()


# --- gradients ---

def test_square_gradient():
    x = tg.leaf(3.0)
    (g,) = tg.gradients(tg.square(x), [x])
    assert g == 6.0


def test_non_scalar_loss_rejected():
    x = tg.leaf(np.ones(3))
    with pytest.raises(tg.GraphError):
        tg.gradients(tg.square(x), [x])


def test_unreachable_gets_zero_gradient():
    x, y = tg.leaf(np.ones(2)), tg.leaf(np.ones((2, 2)))
    gx, gy = tg.gradients(tg.mean(tg.exp(x)), [x, y])
    assert gy.shape == (2, 2) and not gy.any()
    np.testing.assert_allclose(gx, np.e / 2)


def test_nan_guard_names_op():
    with np.errstate(over="ignore"), pytest.raises(tg.NonFiniteError) as info:
        tg.exp(np.array([1000.0]))
    assert info.value.op == "exp"


def _random_composition(rng):
    """A random small network built from the supported ops; returns (f(params), shapes)."""
    d = int(rng.integers(2, 5))
    shapes = {"w1": (3, d), "b1": (d,), "w2": (2 * d, d), "g": (d,)}
    kind = int(rng.integers(0, 4))

    def f(p):
        x = tg.const(np.linspace(-1, 1, 12).reshape(4, 3))
        h = tg.add(tg.matmul(x, p["w1"]), p["b1"])
        if kind == 0:
            h = tg.gelu(h)
        elif kind == 1:
            h = tg.mul(tg.exp(tg.neg(tg.square(h))), tg.cos(h))
        elif kind == 2:
            h = tg.sin(h)
        else:
            h = tg.layer_norm(tg.gelu(h))
        h = tg.matmul(tg.concat([h, tg.square(h)]), p["w2"])
        h = tg.mul(tg.layer_norm(h), p["g"])
        return tg.mean(tg.square(tg.sub(h, 0.3)))

    return f, shapes


@pytest.mark.parametrize("seed", range(20))
def test_random_composition_gradients_match_fd(seed):
    rng = np.random.default_rng(seed)
    f, shapes = _random_composition(rng)
    params = {k: rng.normal(size=s) for k, s in shapes.items()}
    nodes = {k: tg.leaf(v) for k, v in params.items()}
    grads = dict(zip(nodes, tg.gradients(f(nodes), list(nodes.values()))))
    for k in params:
        def fk(v, k=k):
            p = dict(params)
            p[k] = v
            return float(f({n: tg.const(a) for n, a in p.items()}).value)
        assert rel_err(grads[k], fd_grad(fk, params[k])) <= 1e-6


def test_gradient_linearity():
    rng = np.random.default_rng(3)
    w0 = rng.normal(size=(3, 3))
    w = tg.leaf(w0)
    f = tg.mean(tg.gelu(w))
    g = tg.mean(tg.sin(w))
    (gf,) = tg.gradients(f, [w])
    (gg,) = tg.gradients(g, [w])
    w = tg.leaf(w0)
    (gc,) = tg.gradients(tg.add(tg.mul(tg.mean(tg.gelu(w)), 2.0), tg.mul(tg.mean(tg.sin(w)), -0.5)), [w])
    np.testing.assert_allclose(gc, 2.0 * gf - 0.5 * gg, rtol=1e-13, atol=1e-16)


def test_matmul_shape_error():
    with pytest.raises(tg.GraphError):
        tg.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_take_negative_index_and_range():
    a = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(tg.take(a, -1).value, [[2.0], [5.0]])
    with pytest.raises(IndexError):
        tg.take(a, 3)


def test_broadcast_add_gradient_unbroadcasts():
    b = tg.leaf(np.zeros(3))
    (g,) = tg.gradients(tg.mean(tg.add(np.ones((4, 3)), b)), [b])
    np.testing.assert_allclose(g, np.full(3, 1.0 / 3.0))


# --- input derivatives ---

def test_input_jacobian_product():
    pts = np.random.default_rng(0).uniform(-1, 1, (5, 2))
    c = tg.seed_coordinates(pts, (0, 1))
    f = tg.mul(tg.take(c, 0), tg.take(c, 1))
    np.testing.assert_allclose(tg.input_jacobian(f, c, 0).value[:, 0], pts[:, 1])
    np.testing.assert_allclose(tg.input_jacobian(f, c, 1).value[:, 0], pts[:, 0])


def test_input_jacobian_constant_field_and_bad_index():
    c = tg.seed_coordinates(np.zeros((3, 2)), (0,))
    f = tg.add(tg.mul(c, 0.0), 4.0)
    assert not tg.input_jacobian(f, c, 0).value.any()
    with pytest.raises(IndexError):
        tg.input_jacobian(f, c, 1)
    with pytest.raises(IndexError):
        tg.seed_coordinates(np.zeros((3, 2)), (2,))


def test_input_jacobian_span_scaling():
    z = np.linspace(-1, 1, 5)[:, None]
    c = tg.seed_coordinates(z, (0,))
    f = tg.square(c)
    d = tg.input_jacobian(f, c, 0, span=(0.0, 4.0)).value
    np.testing.assert_allclose(d, 2 * z * (2.0 / 4.0))


def test_mixed_derivative_gradient_matches_fd():
    """d/dw of mean((d f / dx)^2) where f = gelu(x w) sin(x w)."""
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (6, 2))
    w0 = rng.normal(size=(2, 3))

    def loss(w):
        c = tg.seed_coordinates(x, (0, 1))
        h = tg.matmul(c, w)
        f = tg.mul(tg.gelu(h), tg.sin(h))
        return tg.mean(tg.square(tg.input_jacobian(f, c, 0)))

    w = tg.leaf(w0)
    (g,) = tg.gradients(loss(w), [w])
    fd = fd_grad(lambda v: float(loss(tg.const(v)).value), w0)
    assert rel_err(g, fd) <= 1e-6


def test_no_grad_records_nothing():
    x = tg.leaf(np.ones(2))
    with tg.no_grad():
        y = tg.exp(x)
    assert not y.requires_grad and y.parents == ()
