import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incres.errors import ShapeError
from incres.nn import functional as F

from oracles import conv2d_loops, pool_loops


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- conv2d

def test_conv_identity_kernel():
    x = rng().standard_normal((2, 4, 5, 3)).astype(np.float32)
    k = np.eye(3, dtype=np.float32).reshape(1, 1, 3, 3)
    y, _ = F.conv2d(x, k, np.zeros(3, np.float32), 1, "same")
    np.testing.assert_array_equal(y, x)


def test_conv_constant_valid_sums_window():
    c = 0.75
    x = np.full((1, 5, 5, 1), c, np.float32)
    y, _ = F.conv2d(x, np.ones((3, 3, 1, 1), np.float32), np.zeros(1, np.float32), 1, "valid")
    assert y.shape == (1, 3, 3, 1)
    np.testing.assert_allclose(y, 9 * c, rtol=1e-6)


def test_conv_stride2_same_shape():
    r = rng()
    y, _ = F.conv2d(r.random((1, 6, 6, 2)).astype(np.float32),
                    r.random((3, 3, 2, 4)).astype(np.float32), np.zeros(4, np.float32), 2, "same")
    assert y.shape == (1, 3, 3, 4)


@pytest.mark.parametrize("kh,kw,stride,padding", [
    (3, 3, 1, "same"), (3, 3, 2, "valid"), (1, 7, 1, "same"), (7, 1, 1, "same"),
    (5, 5, 1, "same"), (1, 1, 2, "valid"), (3, 3, 2, "same"), (2, 2, 1, "same"),
])
def test_conv_matches_loop_oracle(kh, kw, stride, padding):
    r = rng(kh * 10 + kw + stride)
    x = r.standard_normal((2, 7, 8, 3))
    k = r.standard_normal((kh, kw, 3, 4))
    b = r.standard_normal(4)
    y, _ = F.conv2d(x, k, b, stride, padding)
    np.testing.assert_allclose(y, conv2d_loops(x, k, b, stride, padding), rtol=1e-10, atol=1e-10)


def test_same_padding_extra_goes_bottom_right():
    # 4-wide input, 2-wide kernel, stride 1: one pad cell, placed after
    x = np.arange(4, dtype=np.float64).reshape(1, 1, 4, 1)
    k = np.ones((1, 2, 1, 1))
    y, _ = F.conv2d(x, k, None, 1, "same")
    np.testing.assert_array_equal(y.ravel(), [1, 3, 5, 3])


def test_conv_channel_mismatch_names_dims():
    with pytest.raises(ShapeError) as err:
        F.conv2d(np.zeros((1, 4, 4, 3)), np.zeros((3, 3, 2, 5)))
    assert err.value.dims == {"input_channels": 3, "kernel_in_channels": 2}


def test_conv_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        F.conv2d(np.zeros((1, 2, 2, 1)), np.zeros((3, 3, 1, 1)), padding="valid")


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), k=st.integers(1, 4),
       s=st.integers(1, 3), padding=st.sampled_from(["same", "valid"]))
def test_conv_shape_rule(h, w, k, s, padding):
    x = np.zeros((1, h, w, 1))
    if padding == "valid" and (k > h or k > w):
        with pytest.raises(ShapeError):
            F.conv2d(x, np.zeros((k, k, 1, 2)), None, s, padding)
        return
    y, _ = F.conv2d(x, np.zeros((k, k, 1, 2)), None, s, padding)
    if padding == "same":
        expect = (math.ceil(h / s), math.ceil(w / s))
    else:
        expect = ((h - k) // s + 1, (w - k) // s + 1)
    assert y.shape == (1,) + expect + (2,)


# ---------------------------------------------------------------- pooling

@pytest.mark.parametrize("fn", [F.maxpool2d, F.avgpool2d])
def test_pool_constant(fn):
    y, _ = fn(np.full((2, 6, 6, 3), 1.5), 3, 2, "same")
    np.testing.assert_allclose(y, 1.5)


def test_pool_single_window():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    assert F.maxpool2d(x, 2, 2, "valid")[0].item() == 4.0
    assert F.avgpool2d(x, 2, 2, "valid")[0].item() == 2.5


def test_maxpool_grad_routes_to_argmax():
    x = np.array([[1.0, 5.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    _, cache = F.maxpool2d(x, 2, 2, "valid")
    dx = F.maxpool2d_backward(np.ones((1, 1, 1, 1)), cache)
    np.testing.assert_array_equal(dx.ravel(), [0, 1, 0, 0])


def test_maxpool_tie_goes_to_lowest_index():
    x = np.array([[2.0, 7.0], [7.0, 7.0]]).reshape(1, 2, 2, 1)
    _, cache = F.maxpool2d(x, 2, 2, "valid")
    dx = F.maxpool2d_backward(np.ones((1, 1, 1, 1)), cache)
    np.testing.assert_array_equal(dx.ravel(), [0, 1, 0, 0])


@pytest.mark.parametrize("kind", ["max", "avg"])
@pytest.mark.parametrize("window,stride,padding", [(3, 2, "valid"), (3, 1, "same"),
                                                   (2, 2, "same"), (3, 2, "same")])
def test_pool_matches_loop_oracle(kind, window, stride, padding):
    x = rng(window + stride).standard_normal((2, 7, 6, 3))
    fn = F.maxpool2d if kind == "max" else F.avgpool2d
    y, _ = fn(x, window, stride, padding)
    np.testing.assert_allclose(y, pool_loops(x, window, stride, padding, kind), rtol=1e-12)


# ---------------------------------------------------------------- batchnorm

def _bn(x, gamma, beta):
    C = x.shape[-1]
    return F.batchnorm(x, gamma, beta, "train", np.zeros(C), np.ones(C))


def test_batchnorm_on_normalized_input_is_near_identity():
    x = rng().standard_normal((8, 4, 4, 3))
    x = (x - x.mean(axis=(0, 1, 2))) / x.std(axis=(0, 1, 2))
    y, _, _ = _bn(x, np.ones(3), np.zeros(3))
    # the only change is the 1/sqrt(1 + eps) factor
    np.testing.assert_allclose(y, x, atol=F.BN_EPSILON * np.abs(x).max())


def test_batchnorm_zero_scale_gives_shift():
    y, _, _ = _bn(rng().standard_normal((4, 3, 3, 2)), np.zeros(2), np.array([0.5, -2.0]))
    np.testing.assert_allclose(y[..., 0], 0.5)
    np.testing.assert_allclose(y[..., 1], -2.0)


def test_batchnorm_output_statistics():
    r = rng(3)
    # input variance >> eps so var/(var+eps) is within 1e-5 of one
    x = r.standard_normal((16, 5, 5, 4)) * 10 + 3
    gamma, beta = np.array([0.5, 1.0, 2.0, 1.5]), np.array([0.0, -1.0, 0.3, 2.0])
    y, _, _ = _bn(x, gamma, beta)
    np.testing.assert_allclose(y.mean(axis=(0, 1, 2)), beta, atol=1e-4)
    np.testing.assert_allclose(y.var(axis=(0, 1, 2)), gamma ** 2, atol=1e-4)


def test_batchnorm_running_state_update():
    x = rng().standard_normal((4, 2, 2, 2)) + 1.0
    _, (mean, var), _ = _bn(x, np.ones(2), np.zeros(2))
    np.testing.assert_allclose(mean, 0.01 * x.mean(axis=(0, 1, 2)))
    np.testing.assert_allclose(var, 0.99 + 0.01 * x.var(axis=(0, 1, 2)))


def test_batchnorm_eval_uses_running_state():
    x = rng().standard_normal((2, 2, 2, 1))
    y, state, _ = F.batchnorm(x, np.ones(1), np.zeros(1), "eval", np.array([1.0]), np.array([4.0]))
    np.testing.assert_allclose(y, (x - 1.0) / np.sqrt(4.0 + F.BN_EPSILON))
    assert state[0][0] == 1.0 and state[1][0] == 4.0


def test_batchnorm_single_element_train_is_error():
    with pytest.raises(ShapeError):
        _bn(np.ones((1, 1, 1, 3)), np.ones(3), np.zeros(3))


# ---------------------------------------------------------------- dense / structural

def test_dense_identity_and_bias():
    x = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(F.dense(x, np.eye(2), np.zeros(2))[0], x)
    np.testing.assert_array_equal(F.dense(x, np.eye(2), np.array([3.0, 4.0]))[0], [[4.0, 6.0]])


def test_dense_shape_and_mismatch():
    y, _ = F.dense(np.zeros((5, 3)), np.zeros((3, 7)), np.zeros(7))
    assert y.shape == (5, 7)
    with pytest.raises(ShapeError):
        F.dense(np.zeros((5, 3)), np.zeros((4, 7)))


def test_concat_single_and_pair():
    a = rng().random((2, 3, 3, 2))
    b = rng(1).random((2, 3, 3, 3))
    out, sizes = F.concat_channels([a])
    np.testing.assert_array_equal(out, a)
    out, sizes = F.concat_channels([a, b])
    assert out.shape[-1] == 5
    np.testing.assert_array_equal(out[..., :2], a)
    np.testing.assert_array_equal(out[..., 2:], b)


def test_concat_split_roundtrip_values_and_grads():
    parts = [rng(i).random((2, 4, 4, c)) for i, c in enumerate([1, 3, 2])]
    out, sizes = F.concat_channels(parts)
    for got, want in zip(F.split_channels(out, sizes), parts):
        np.testing.assert_array_equal(got, want)
    g = rng(9).random(out.shape)
    back = F.split_channels(g, sizes)
    np.testing.assert_array_equal(np.concatenate(back, axis=-1), g)


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        F.concat_channels([np.zeros((1, 3, 3, 1)), np.zeros((1, 4, 3, 1))])


def test_residual_add_scaled():
    s = np.ones((1, 2, 2, 3))
    np.testing.assert_array_equal(F.residual_add_scaled(s, np.zeros_like(s), 0.2), s)
    np.testing.assert_allclose(F.residual_add_scaled(s, 2 * s, 0.2), 1.4)
    g = rng().random(s.shape)
    d_short, d_branch = F.residual_add_scaled_backward(g, 0.2)
    np.testing.assert_array_equal(d_short, g)
    np.testing.assert_allclose(d_branch, 0.2 * g)
    with pytest.raises(ShapeError):
        F.residual_add_scaled(s, np.zeros((1, 2, 2, 2)), 0.2)


def test_relu():
    assert F.relu(-np.ones(4))[0].tolist() == [0, 0, 0, 0]
    x = np.array([0.5, 2.0])
    np.testing.assert_array_equal(F.relu(x)[0], x)
    y, mask = F.relu(np.array([-1.0, 0.0, 2.0]))
    assert y.tolist() == [0, 0, 2]
    # gradient at exactly zero is zero
    assert F.relu_backward(np.ones(3), mask).tolist() == [0, 0, 1]


# ---------------------------------------------------------------- loss

def test_xent_uniform_two_classes():
    loss, _ = F.softmax_cross_entropy(np.zeros((1, 2)), [0])
    assert loss == pytest.approx(0.693147, abs=1e-6)


def test_xent_saturated_is_finite():
    loss, grad = F.softmax_cross_entropy(np.array([[1000.0, -1000.0]]), [0])
    assert math.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-12)
    assert np.isfinite(grad).all()


def test_xent_worked_value():
    # ln(1 + e^-1) evaluated independently to high precision
    loss, _ = F.softmax_cross_entropy(np.array([[1.0, 2.0]]), [1])
    assert loss == pytest.approx(0.31326168751822286, abs=1e-12)


@pytest.mark.parametrize("k", range(2, 17))
def test_xent_uniform_is_ln_k(k):
    loss, _ = F.softmax_cross_entropy(np.zeros((3, k)), [0, k - 1, k // 2])
    assert loss == pytest.approx(math.log(k), rel=4 * np.finfo(np.float64).eps)


def test_xent_gradient_formula():
    logits = rng().standard_normal((4, 3))
    labels = np.array([0, 2, 1, 1])
    _, grad = F.softmax_cross_entropy(logits, labels)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(grad, (p - np.eye(3)[labels]) / 4, rtol=1e-12)


def test_xent_bad_label():
    with pytest.raises(ValueError):
        F.softmax_cross_entropy(np.zeros((2, 2)), [0, 2])


# ---------------------------------------------------------------- determinism

def test_primitives_are_deterministic():
    r = rng(5)
    x = r.standard_normal((2, 9, 9, 3)).astype(np.float32)
    k = r.standard_normal((3, 3, 3, 4)).astype(np.float32)
    a = F.conv2d(x, k, None, 2, "same")[0]
    b = F.conv2d(x.copy(), k.copy(), None, 2, "same")[0]
    assert a.tobytes() == b.tobytes()
    assert F.maxpool2d(x, 3, 2)[0].tobytes() == F.maxpool2d(x.copy(), 3, 2)[0].tobytes()
