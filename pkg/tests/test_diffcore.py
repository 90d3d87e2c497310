import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aip.diffcore import (OptimizerState, extractor_from_bytes, extractor_to_bytes, init_extractor, load_extractor,
                          optimizer_step, save_extractor)
from aip.errors import DimensionError, DomainError, OptimizationError

ZOO = [("linear", (4, 4, 2), 5, {}), ("conv-small", (8, 8, 2), 6, {"channels": (3, 4)}),
       ("conv-small", (4, 8, 1), 3, {"channels": (2, 2)})]


def fd_input(ex, x, up, coords, h=1e-4):
    """Central differences of <up, f(x)> at the given flat pixel indices."""
    out = []
    for c in coords:
        xp, xm = x.copy().ravel(), x.copy().ravel()
        xp[c] += h
        xm[c] -= h
        fp = ex.forward(xp.reshape(x.shape)) @ up
        fm = ex.forward(xm.reshape(x.shape)) @ up
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def fd_params(ex, x, up, coords, h=1e-4):
    out = []
    for c in coords:
        pp, pm = ex.params.copy(), ex.params.copy()
        pp[c] += h
        pm[c] -= h
        out.append((ex.with_params(pp).forward(x) @ up - ex.with_params(pm).forward(x) @ up) / (2 * h))
    return np.array(out)


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


@pytest.mark.parametrize("arch,shape,out_dim,kw", ZOO)
def test_gradients_match_finite_differences(arch, shape, out_dim, kw):
    rng = np.random.default_rng(0)
    ex = init_extractor(arch, shape, out_dim, seed=1, **kw)
    # nonzero biases so rectifier kinks sit away from zero
    ex = ex.with_params(ex.params + rng.normal(0, 0.05, ex.n_params))
    for _ in range(10):
        x = rng.uniform(0.05, 0.95, size=shape)
        up = rng.normal(size=out_dim)
        pix = rng.choice(x.size, size=8, replace=False)
        par = rng.choice(ex.n_params, size=8, replace=False)
        assert rel_err(ex.input_gradient(x, up).ravel()[pix], fd_input(ex, x, up, pix)) < 1e-3
        assert rel_err(ex.param_gradient(x, up)[par], fd_params(ex, x, up, par)) < 1e-3


def test_zero_params_zero_image_gives_zero_features():
    for arch, shape, out_dim, kw in ZOO:
        ex = init_extractor(arch, shape, out_dim, bias=False, **kw)
        ex = ex.with_params(np.zeros(ex.n_params))
        assert np.array_equal(ex.forward(np.zeros(shape)), np.zeros(out_dim))


def test_identity_linear_extractor_flattens_pixels(rng):
    ex = init_extractor("linear", (8, 8, 1), 64, bias=False)
    ex = ex.with_params(np.eye(64).ravel())
    x = rng.uniform(size=(8, 8, 1))
    np.testing.assert_array_equal(ex.forward(x), x.ravel())


def test_linear_input_gradient_is_weight_row(rng):
    ex = init_extractor("linear", (4, 4, 3), 7, seed=3)
    x = rng.uniform(size=(4, 4, 3))
    w = ex.params[:7 * 48].reshape(7, 48)
    for k in range(7):
        np.testing.assert_allclose(ex.input_gradient(x, np.eye(7)[k]), w[k].reshape(4, 4, 3), rtol=0, atol=1e-15)


def test_linear_weight_gradient_is_outer_product(rng):
    ex = init_extractor("linear", (3, 3, 1), 4, seed=3)
    x = rng.uniform(size=(3, 3, 1))
    up = rng.normal(size=4)
    g = ex.param_gradient(x, up)
    np.testing.assert_allclose(g[:36].reshape(4, 9), np.outer(up, x.ravel()), atol=1e-15)
    np.testing.assert_allclose(g[36:], up, atol=1e-15)


@pytest.mark.parametrize("arch,shape,out_dim,kw", ZOO)
def test_zero_upstream_gives_zero_gradients(arch, shape, out_dim, kw, rng):
    ex = init_extractor(arch, shape, out_dim, **kw)
    x = rng.uniform(size=shape)
    assert not ex.input_gradient(x, np.zeros(out_dim)).any()
    assert not ex.param_gradient(x, np.zeros(out_dim)).any()


@pytest.mark.parametrize("arch,shape,out_dim,kw", ZOO)
def test_pure_and_deterministic(arch, shape, out_dim, kw, rng):
    ex = init_extractor(arch, shape, out_dim, **kw)
    x, up = rng.uniform(size=shape), rng.normal(size=out_dim)
    before = ex.params.copy()
    assert np.array_equal(ex.forward(x), ex.forward(x.copy()))
    assert np.array_equal(ex.input_gradient(x, up), ex.input_gradient(x, up))
    assert np.array_equal(ex.param_gradient(x, up), ex.param_gradient(x, up))
    assert np.array_equal(ex.params, before)
    assert not ex.params.flags.writeable


def test_batch_matches_single(rng):
    ex = init_extractor("conv-small", (8, 8, 3), 5, channels=(2, 3), seed=2)
    xs = rng.uniform(size=(4, 8, 8, 3))
    ups = rng.normal(size=(4, 5))
    np.testing.assert_allclose(ex.forward(xs), np.stack([ex.forward(x) for x in xs]), atol=1e-13)
    np.testing.assert_allclose(ex.input_gradient(xs, ups), np.stack([ex.input_gradient(x, u) for x, u in zip(xs, ups)]),
                               atol=1e-13)
    np.testing.assert_allclose(ex.param_gradient(xs, ups), sum(ex.param_gradient(x, u) for x, u in zip(xs, ups)),
                               atol=1e-12)


def test_forward_backward_agrees_with_separate_calls(rng):
    ex = init_extractor("conv-small", (8, 8, 1), 4, channels=(2, 2), seed=4)
    xs = rng.uniform(size=(3, 8, 8, 1))
    up = rng.normal(size=(3, 4))
    feats, aux, gx, gp = ex.forward_backward(xs, lambda f: (up, "tag"))
    assert aux == "tag"
    np.testing.assert_allclose(feats, ex.forward(xs))
    np.testing.assert_allclose(gx, ex.input_gradient(xs, up))
    np.testing.assert_allclose(gp, ex.param_gradient(xs, up))


def test_scaled_uniform_initialization_bounds():
    ex = init_extractor("linear", (5, 5, 2), 10, seed=9)
    limit = np.sqrt(6.0 / (50 + 10))
    w, b = ex.params[:500], ex.params[500:]
    assert np.all(np.abs(w) <= limit) and np.abs(w).max() > 0.9 * limit
    assert not b.any()
    assert np.array_equal(init_extractor("linear", (5, 5, 2), 10, seed=9).params, ex.params)


@pytest.mark.parametrize("bad,err", [(np.zeros((5, 5, 3)), DimensionError), (np.full((4, 4, 2), np.nan), DomainError)])
def test_input_errors(bad, err):
    ex = init_extractor("linear", (4, 4, 2), 3)
    with pytest.raises(err):
        ex.forward(bad)


def test_upstream_shape_error():
    ex = init_extractor("linear", (4, 4, 2), 3)
    with pytest.raises(DimensionError):
        ex.input_gradient(np.zeros((4, 4, 2)), np.zeros(4))


def test_conv_rejects_indivisible_shape():
    with pytest.raises(DimensionError):
        init_extractor("conv-small", (6, 6, 3), 4)


@given(st.floats(-3, 3), st.integers(0, 2 ** 16))
def test_linear_extractor_is_affine(a, seed):
    rng = np.random.default_rng(seed)
    ex = init_extractor("linear", (3, 3, 2), 4, seed=seed)
    ex = ex.with_params(ex.params + rng.normal(0, 0.1, ex.n_params))
    x, y = rng.uniform(size=(2, 3, 3, 2))
    np.testing.assert_allclose(ex.forward(a * x + (1 - a) * y), a * ex.forward(x) + (1 - a) * ex.forward(y), atol=1e-12)


@given(st.integers(0, 2 ** 16))
def test_conv_features_are_nonnegatively_homogeneous_without_bias(seed):
    # relu and average pooling commute with positive scaling
    rng = np.random.default_rng(seed)
    ex = init_extractor("conv-small", (4, 4, 1), 3, channels=(2, 2), bias=False, seed=seed)
    x = rng.uniform(size=(4, 4, 1))
    np.testing.assert_allclose(ex.forward(0.5 * x), 0.5 * ex.forward(x), atol=1e-13)


# -- serialization -----------------------------------------------------------

def test_fex_round_trip(tmp_path):
    ex = init_extractor("conv-small", (8, 8, 3), 6, channels=(3, 4), seed=5)
    save_extractor(ex, tmp_path / "e.fex")
    back = load_extractor(tmp_path / "e.fex")
    assert np.array_equal(back.params, ex.params)
    assert (back.arch, back.input_shape, back.out_dim, back.channels) == (ex.arch, ex.input_shape, 6, (3, 4))


def test_fex_layout_is_little_endian_float64():
    ex = init_extractor("linear", (2, 2, 1), 2, seed=5)
    blob = extractor_to_bytes(ex)
    assert blob[:4] == b"FEX1"
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen])
    assert header["descriptor"] == "linear-2"
    assert header["shapes"] == [[2, 4], [2]]
    np.testing.assert_array_equal(np.frombuffer(blob[8 + hlen:], dtype="<f8"), ex.params)
    assert np.array_equal(extractor_from_bytes(blob).params, ex.params)


def test_fex_rejects_foreign_blob():
    with pytest.raises(DomainError):
        extractor_from_bytes(b"nope" + bytes(20))


# -- optimizers ----------------------------------------------------------------

@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_leaves_vector(kind):
    v = np.array([1.0, -2.0])
    out, st_ = optimizer_step(OptimizerState(kind=kind, lr=0.1), v, np.zeros(2))
    assert np.array_equal(out, v) and st_.step == 1


def test_sgd_definition():
    out, _ = optimizer_step(OptimizerState(kind="sgd", lr=0.1), np.array([1.0, 1.0]), np.array([1.0, -1.0]))
    np.testing.assert_allclose(out, [0.9, 1.1])
    up, _ = optimizer_step(OptimizerState(kind="sgd", lr=0.1), np.array([1.0, 1.0]), np.array([1.0, -1.0]), "ascend")
    np.testing.assert_allclose(up, [1.1, 0.9])


def test_adam_first_step_matches_hand_computation():
    # m = 0.1, v = 0.001; corrected m_hat = 1, v_hat = 1 -> step = lr * 1 / (1 + 1e-8)
    out, st_ = optimizer_step(OptimizerState(kind="adam", lr=0.05), np.array([0.0]), np.array([1.0]))
    np.testing.assert_allclose(out, [-0.05 / (1 + 1e-8)], rtol=1e-12)
    np.testing.assert_allclose(st_.m, [0.1])
    np.testing.assert_allclose(st_.v, [0.001])


def test_adam_second_step_matches_hand_computation():
    s = OptimizerState(kind="adam", lr=0.1)
    x, s = optimizer_step(s, np.array([0.0]), np.array([1.0]))
    x, s = optimizer_step(s, x, np.array([-2.0]))
    m = 0.9 * 0.1 + 0.1 * -2.0
    v = 0.999 * 0.001 + 0.001 * 4.0
    expected = -0.1 / (1 + 1e-8) - 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(x, [expected], rtol=1e-12)
    assert s.step == 2


def test_non_finite_gradient_reports_index():
    with pytest.raises(OptimizationError) as info:
        optimizer_step(OptimizerState(kind="adam"), np.zeros(4), np.array([0.0, 1.0, np.inf, np.nan]))
    assert info.value.index == 2


def test_bad_state_rejected():
    with pytest.raises(ValueError):
        OptimizerState(kind="rmsprop")
    with pytest.raises(ValueError):
        OptimizerState(kind="sgd", lr=0.0)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.sampled_from(["sgd", "adam"]),
       st.integers(1, 5))
def test_counter_and_accumulator_shapes(grad, kind, steps):
    g = np.array(grad)
    s = OptimizerState(kind=kind, lr=0.01)
    v = np.zeros_like(g)
    for k in range(steps):
        v, s = optimizer_step(s, v, g)
        assert s.step == k + 1
        if kind == "adam":
            assert s.m.shape == g.shape and s.v.shape == g.shape


def test_plain_ascent_on_concave_quadratic_converges():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 5))
    h = a @ a.T + np.eye(5)  # maximize -0.5 x'Hx + b'x
    b = rng.normal(size=5)
    lr = 1.0 / np.linalg.eigvalsh(h).max()
    s, x = OptimizerState(kind="sgd", lr=lr), np.zeros(5)
    for _ in range(1000):
        g = b - h @ x
        if np.abs(g).max() < 1e-6:
            break
        x, s = optimizer_step(s, x, g, "ascend")
    assert np.abs(b - h @ x).max() < 1e-6
    np.testing.assert_allclose(x, np.linalg.solve(h, b), atol=1e-5)
