import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import conv_oracle
from mghf.numerics import (
    NumericalError,
    ShapeError,
    avg_pool2,
    avg_pool2_backward,
    conv2d,
    conv2d_backward,
    conv2d_cols,
    finite_diff_grad,
    leaky_relu,
    make_rng,
    relative_error,
)


def test_conv_identity_1x1():
    x = make_rng(0).normal(size=(3, 5, 6))
    k = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(conv2d(x, k, np.zeros(3), 0), x)


def test_conv_constant_field():
    c = 1.75
    out = conv2d(np.full((1, 6, 7), c), np.ones((1, 1, 3, 3)), np.zeros(1), 0)
    assert out.shape == (1, 4, 5)
    np.testing.assert_allclose(out, 9 * c, rtol=0, atol=1e-14)


def test_conv_matches_nested_loop():
    rng = make_rng(42)
    x = rng.normal(size=(2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    for pad in (0, 1, 2):
        assert np.max(np.abs(conv2d(x, k, b, pad) - conv_oracle(x, k, b, pad))) < 1e-6


def test_conv_small_shape_sweep():
    rng = make_rng(7)
    for c in range(1, 5):
        for h in range(3, 9, 2):
            for w in range(3, 9, 3):
                for ksz in (1, 3):
                    for pad in (0, 1):
                        x = rng.normal(size=(c, h, w))
                        k = rng.normal(size=(2, c, ksz, ksz))
                        b = rng.normal(size=2)
                        np.testing.assert_allclose(conv2d(x, k, b, pad), conv_oracle(x, k, b, pad), atol=1e-12)


def test_conv_batched_matches_single():
    rng = make_rng(3)
    x = rng.normal(size=(4, 2, 6, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    batched = conv2d(x, k, b, 1)
    for i in range(4):
        np.testing.assert_allclose(batched[i], conv2d(x[i], k, b, 1), atol=1e-13)


@pytest.mark.parametrize(
    "xshape,kshape,pad",
    [((2, 5, 5), (3, 3, 3, 3), 0), ((2, 5, 5), (3, 2, 2, 2), 0), ((1, 2, 2), (1, 1, 5, 5), 0), ((1, 4, 4), (1, 1, 3, 3), -1)],
)
def test_conv_shape_errors(xshape, kshape, pad):
    with pytest.raises(ShapeError):
        conv2d(np.zeros(xshape), np.zeros(kshape), np.zeros(kshape[0]), pad)


def test_conv_backward_matches_finite_differences():
    rng = make_rng(5)
    x = rng.normal(size=(2, 4, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    w = rng.normal(size=(3, 4, 5))
    gx, gk, gb = conv2d_backward(x, k, w, 1)
    assert relative_error(gx, finite_diff_grad(lambda v: np.sum(w * conv2d(v, k, b, 1)), x)) < 1e-8
    assert relative_error(gk, finite_diff_grad(lambda v: np.sum(w * conv2d(x, v, b, 1)), k)) < 1e-8
    assert relative_error(gb, finite_diff_grad(lambda v: np.sum(w * conv2d(x, k, v, 1)), b)) < 1e-8


@pytest.mark.parametrize("kh,kw,padding", [(3, 3, 0), (3, 3, 2), (1, 1, 1), (1, 3, 1), (5, 3, 3)])
def test_conv_input_gradient_all_padding_regimes(kh, kw, padding):
    rng = make_rng(kh * 10 + kw + padding)
    x = rng.normal(size=(2, 2, 5, 6))
    k = rng.normal(size=(3, 2, kh, kw))
    b = np.zeros(3)
    w = rng.normal(size=conv2d(x, k, b, padding).shape)
    gx, gk, _ = conv2d_backward(x, k, w, padding)
    assert relative_error(gx, finite_diff_grad(lambda v: np.sum(w * conv2d(v, k, b, padding)), x)) < 1e-8
    assert relative_error(gk, finite_diff_grad(lambda v: np.sum(w * conv2d(x, v, b, padding)), k)) < 1e-8


def test_conv_backward_flags():
    rng = make_rng(6)
    x = rng.normal(size=(2, 4, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    w = rng.normal(size=(3, 4, 5))
    out, cols = conv2d_cols(x, k, np.zeros(3), 1)
    np.testing.assert_array_equal(out, conv2d(x, k, np.zeros(3), 1))
    full = conv2d_backward(x, k, w, 1)
    gx, gk, gb = conv2d_backward(x, k, w, 1, need_input=False, cols=cols)
    assert gx is None
    np.testing.assert_array_equal(gk, full[1])
    np.testing.assert_array_equal(gb, full[2])


def test_leaky_relu_values():
    assert leaky_relu(np.array(0.0)) == 0.0
    assert leaky_relu(np.array(-2.0), 0.2) == pytest.approx(-0.4)
    x = make_rng(1).normal(size=50)
    expect = np.array([v if v > 0 else 0.3 * v for v in x])
    np.testing.assert_array_equal(leaky_relu(x, 0.3), expect)
    with pytest.raises(ValueError):
        leaky_relu(x, 1.0)


def test_avg_pool_adjoint():
    rng = make_rng(9)
    x = rng.normal(size=(2, 3, 6, 6))
    y = rng.normal(size=(2, 3, 3, 3))
    # <pool(x), y> == <x, pool^T(y)>
    assert np.sum(avg_pool2(x) * y) == pytest.approx(np.sum(x * avg_pool2_backward(x.shape, y)), rel=1e-12)


def test_finite_diff_quadratic():
    g = finite_diff_grad(lambda v: float(np.sum(v ** 2)), np.array([[[1.0, 2.0, 3.0]]]), eps=1e-4)
    np.testing.assert_allclose(g, [[[2.0, 4.0, 6.0]]], atol=1e-6)


def test_finite_diff_constant():
    np.testing.assert_array_equal(finite_diff_grad(lambda v: 3.0, np.ones((1, 2, 2))), np.zeros((1, 2, 2)))


def test_finite_diff_rejects_nonfinite():
    with pytest.raises(NumericalError):
        finite_diff_grad(lambda v: float("nan"), np.ones(3))
    with pytest.raises(ValueError):
        finite_diff_grad(lambda v: 0.0, np.ones(3), eps=0.0)


def test_rng_reproducible():
    a = make_rng(99, 1, 2).normal(size=8)
    b = make_rng(99, 1, 2).normal(size=8)
    c = make_rng(99, 1, 3).normal(size=8)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_reductions_bit_identical():
    x = make_rng(4).normal(size=(3, 16, 16))
    k = make_rng(5).normal(size=(4, 3, 3, 3))
    first = conv2d(x, k, np.zeros(4), 1)
    for _ in range(3):
        assert conv2d(x, k, np.zeros(4), 1).tobytes() == first.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(3, 6), st.integers(3, 6), st.integers(0, 1), st.integers(0, 2**31))
def test_conv_oracle_property(c, h, w, pad, seed):
    rng = make_rng(seed)
    x = rng.normal(size=(c, h, w))
    k = rng.normal(size=(2, c, 3, 3))
    b = rng.normal(size=2)
    np.testing.assert_allclose(conv2d(x, k, b, pad), conv_oracle(x, k, b, pad), atol=1e-12)
