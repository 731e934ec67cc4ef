import json
import math

import numpy as np
import pytest

from pilno import tensorgraph as tg
from pilno.data import NormStats
from pilno.model import (CheckpointError, CheckpointShapeError, CheckpointTruncatedError, CheckpointVersionError,
                         ModelConfig, encode_input, forward, init_params, laplace_kernel, laplace_projection_layer,
                         load_checkpoint, param_shapes, predict, save_checkpoint)

TINY = ModelConfig(d_v=8, n_layers=2, n_poles=4)


@pytest.fixture
def stats():
    return NormStats({"x": 0.0, "y": 0.0, "t": 0.0}, {"x": 1e-3, "y": 2e-3, "t": 0.08},
                     {"U": 0.0, "V": 0.0, "P": 1.0, "phi": 0.0}, {"U": 1e-5, "V": 1e-5, "P": 2.0, "phi": 0.9})


def random_coords(rng, b=2, n=7):
    z = rng.uniform(-1, 1, (b, n, 3))
    th = np.radians(rng.uniform(20, 160, (b, n, 1)))
    return np.concatenate([z, np.cos(th), np.sin(th)], axis=-1)


# --- encoding ---

def test_encode_examples(stats):
    enc = encode_input([0.0, 1e-3], [1e-3, 1e-3], [0.04, 0.04], [90.0, 90.0], stats)
    np.testing.assert_allclose(enc.coords[:, 3:], [[0.0, 1.0]] * 2, atol=1e-15)
    assert enc.coords[0, 0] == -1.0 and enc.coords[1, 0] == 1.0
    assert enc.coords[0, 2] == pytest.approx(0.0, abs=1e-15)
    assert enc.n_clamped == 0
    np.testing.assert_allclose(enc.kernel_time, 0.5)


def test_encode_clamps_and_counts(stats):
    enc = encode_input([2e-3], [-1e-3], [0.04], [45.0], stats)
    assert enc.n_clamped == 2
    assert enc.coords[0, 0] == 1.0 and enc.coords[0, 1] == -1.0
    assert enc.coords[0, 3] ** 2 + enc.coords[0, 4] ** 2 == pytest.approx(1.0, abs=1e-12)


# --- parameters ---

def test_param_count_tiny():
    expected = (5 * 8 + 8) + 2 * (4 + 4 + 2 * 8 * 4 + 8 * 8 + 2 * 4 * 8 + 8 + 2 * 8) + (8 * 8 + 8) + (8 * 4 + 4)
    assert init_params(TINY, 0).count() == expected == 604


def test_default_param_count():
    shapes = param_shapes(ModelConfig())
    assert sum(math.prod(s) for s in shapes.values()) == 1_124_100


def test_init_ranges_and_determinism():
    p = init_params(ModelConfig(16, 3, 8), 5)
    q = init_params(ModelConfig(16, 3, 8), 5)
    for k in p.arrays:
        assert np.array_equal(p.arrays[k], q.arrays[k])
    for sigma, omega in p.poles():
        assert ((sigma >= 1e-2) & (sigma <= 1e2)).all()
        assert (np.abs(omega) <= math.pi).all()
    lim = math.sqrt(6 / (5 + 16))
    assert np.abs(p.arrays["W_lift"]).max() <= lim
    assert (p.arrays["layers.0.ln_gain"] == 1).all() and not p.arrays["layers.0.ln_bias"].any()
    r = init_params(ModelConfig(16, 3, 8), 6)
    assert not np.array_equal(p.arrays["W_lift"], r.arrays["W_lift"])


def test_invalid_config():
    with pytest.raises(ValueError):
        ModelConfig(0, 1, 1)


# --- kernel and layer ---

def test_kernel_at_zero_time():
    kr, ki = laplace_kernel(np.zeros((3, 1)), np.log(np.array([0.5, 2.0])), np.array([1.0, -2.0]))
    np.testing.assert_array_equal(kr.value, 1.0)
    np.testing.assert_array_equal(ki.value, 0.0)


def test_kernel_single_pole():
    kr, ki = laplace_kernel(np.ones((1, 1)), np.array([0.0]), np.array([math.pi]))
    assert kr.value[0, 0] == pytest.approx(-math.exp(-1), abs=1e-7)
    assert ki.value[0, 0] == pytest.approx(0.0, abs=1e-15)


def test_kernel_bounded_and_clamped():
    rng = np.random.default_rng(0)
    t = rng.uniform(0, 1, (50, 1))
    kr, ki = laplace_kernel(t, rng.uniform(np.log(1e-3), np.log(1e4), 16), rng.uniform(-10, 10, 16))
    assert np.abs(kr.value).max() <= 1 and np.abs(ki.value).max() <= 1
    assert np.isfinite(kr.value).all()


def test_layer_shapes_and_errors():
    p = init_params(TINY, 0)
    v = np.random.default_rng(0).normal(size=(2, 5, 8))
    out = laplace_projection_layer(v, np.full((2, 5, 1), 0.3), p.layer(0))
    assert out.shape == (2, 5, 8)
    with pytest.raises(ValueError):
        laplace_projection_layer(v[..., :6], np.full((2, 5, 1), 0.3), p.layer(0))
    with pytest.raises(ValueError):
        laplace_projection_layer(v, np.full((2, 4, 1), 0.3), p.layer(0))


# --- forward ---

def test_forward_shape_and_determinism():
    p = init_params(TINY, 1)
    c = random_coords(np.random.default_rng(1))
    a = forward(p, c).value
    b = forward(p, c).value
    assert a.shape == (2, 7, 4)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        forward(p, c[..., :4])


def test_forward_point_permutation_equivariance():
    p = init_params(TINY, 2)
    c = random_coords(np.random.default_rng(2), 1, 9)
    perm = np.random.default_rng(3).permutation(9)
    np.testing.assert_allclose(forward(p, c[:, perm]).value, forward(p, c).value[:, perm], rtol=0, atol=1e-14)


def test_predict_matches_forward_in_chunks():
    p = init_params(TINY, 3)
    c = random_coords(np.random.default_rng(3), 1, 25)[0]
    np.testing.assert_allclose(predict(p, c, chunk=4), forward(p, c[None]).value[0], rtol=0, atol=1e-15)


def test_input_jacobian_of_model_matches_fd():
    p = init_params(ModelConfig(12, 2, 6), 4)
    c0 = random_coords(np.random.default_rng(4), 1, 6)
    c = tg.seed_coordinates(c0, (0, 1, 2))
    out = forward(p, c)
    h = 1e-5
    for d in (0, 1, 2):
        jac = tg.input_jacobian(out, c, d).value
        cp, cm = c0.copy(), c0.copy()
        cp[..., d] += h
        cm[..., d] -= h
        fd = (forward(p, cp).value - forward(p, cm).value) / (2 * h)
        assert np.max(np.abs(jac - fd) / np.maximum(1.0, np.abs(fd))) <= 1e-5
        assert np.isfinite(jac).all()


# --- checkpoints ---

def test_checkpoint_round_trip_bitwise(tmp_path, stats):
    p = init_params(TINY, 7)
    path = tmp_path / "ckpt.json"
    save_checkpoint(p, stats, path)
    q, s2 = load_checkpoint(path)
    assert q.count() == p.count() and q.config == p.config and q.seed == 7
    assert s2 == stats
    c = random_coords(np.random.default_rng(7))
    assert np.array_equal(forward(p, c).value, forward(q, c).value)
    for k in p.arrays:
        assert np.array_equal(p.arrays[k], q.arrays[k])


def test_checkpoint_errors(tmp_path, stats):
    p = init_params(TINY, 0)
    path = tmp_path / "ckpt.json"
    save_checkpoint(p, stats, path)
    doc = json.loads(path.read_text())

    bad = dict(doc, version=99)
    (tmp_path / "v.json").write_text(json.dumps(bad))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "v.json")

    bad = json.loads(path.read_text())
    bad["config"]["d_v"] = 9
    (tmp_path / "s.json").write_text(json.dumps(bad))
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(tmp_path / "s.json")

    bad = json.loads(path.read_text())
    bad["params"]["W_lift"] = [[1.0, 2.0], [3.0]]
    (tmp_path / "r.json").write_text(json.dumps(bad))
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(tmp_path / "r.json")

    text = path.read_text()
    (tmp_path / "t.json").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(tmp_path / "t.json")

    (tmp_path / "f.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "f.json")

    codes = {CheckpointVersionError.code, CheckpointShapeError.code, CheckpointTruncatedError.code}
    assert len(codes) == 3
