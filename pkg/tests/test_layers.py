import numpy as np
import pytest
from scipy.signal import correlate

from sigma_mapper import layers
from sigma_mapper.errors import DimensionError


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        plus = f()
        x[i] = old - eps
        minus = f()
        x[i] = old
        g[i] = (plus - minus) / (2 * eps)
    return g


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_conv_matches_scipy_correlation_of_reflected_input(rng):
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    y, _ = layers.conv_forward(x, w, b)
    assert y.shape == (2, 4, 6, 5)
    for n in range(2):
        for o in range(4):
            expected = sum(correlate(np.pad(x[n, c], 1, mode="reflect"), w[o, c], mode="valid", method="direct")
                           for c in range(3)) + b[o]
            np.testing.assert_allclose(y[n, o], expected, atol=1e-12)


def test_conv_of_constant_image_is_constant(rng):
    w = rng.normal(size=(2, 1, 3, 3))
    y, _ = layers.conv_forward(np.full((1, 1, 7, 9), 3.0), w, np.zeros(2))
    for o in range(2):
        np.testing.assert_allclose(y[0, o], 3.0 * w[o].sum(), rtol=1e-12)


def test_reflect_pad_edges():
    x = np.arange(4.0).reshape(1, 1, 1, 4)
    padded = layers.reflect_pad(x, 1)
    np.testing.assert_array_equal(padded[0, 0, 1], [1, 0, 1, 2, 3, 2])
    np.testing.assert_array_equal(padded[0, 0, 0], padded[0, 0, 1])
    with pytest.raises(DimensionError):
        layers.reflect_pad(np.zeros((1, 1, 2, 2)), 2)


@pytest.mark.parametrize("shape, p", [((1, 1, 1, 4), 2), ((2, 2, 5, 4), 2), ((1, 2, 3, 6), 2), ((1, 1, 2, 3), 1)])
def test_reflect_unpad_is_the_adjoint(rng, shape, p):
    x = rng.normal(size=shape)
    padded = layers.reflect_pad(x, p)
    d = rng.normal(size=padded.shape)
    assert (padded * d).sum() == pytest.approx((x * layers.reflect_unpad(d, p)).sum(), rel=1e-9)


@pytest.mark.parametrize("k, shape", [(1, (2, 2, 5, 4)), (3, (2, 2, 5, 4)), (3, (1, 2, 1, 3)), (3, (1, 2, 2, 2))])
def test_conv_backward(rng, k, shape):
    x = rng.normal(size=shape)
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=3)
    dy = rng.normal(size=(shape[0], 3) + shape[2:])

    def loss():
        return float((layers.conv_forward(x, w, b)[0] * dy).sum())

    _, cols = layers.conv_forward(x, w, b)
    dx, dw, db = layers.conv_backward(dy, cols, w)
    assert rel_error(dx, numeric_grad(loss, x)) < 1e-7
    assert rel_error(dw, numeric_grad(loss, w)) < 1e-7
    assert rel_error(db, numeric_grad(loss, b)) < 1e-7


def test_conv_channel_mismatch(rng):
    with pytest.raises(DimensionError):
        layers.conv_forward(rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 3, 3, 3)), np.zeros(1))


def test_stride_conv_halves_and_backward(rng):
    x = rng.normal(size=(2, 2, 6, 4))
    w = rng.normal(size=(3, 2, 2, 2))
    b = rng.normal(size=3)
    y, xr = layers.stride_conv_forward(x, w, b)
    assert y.shape == (2, 3, 3, 2)
    np.testing.assert_allclose(y[1, 2, 1, 0], (x[1, :, 2:4, 0:2] * w[2]).sum() + b[2])
    dy = rng.normal(size=y.shape)

    def loss():
        return float((layers.stride_conv_forward(x, w, b)[0] * dy).sum())

    dx, dw, db = layers.stride_conv_backward(dy, xr, w)
    assert rel_error(dx, numeric_grad(loss, x)) < 1e-7
    assert rel_error(dw, numeric_grad(loss, w)) < 1e-7
    assert rel_error(db, numeric_grad(loss, b)) < 1e-7


def test_stride_conv_odd_size(rng):
    with pytest.raises(DimensionError):
        layers.stride_conv_forward(rng.normal(size=(1, 1, 5, 4)), rng.normal(size=(1, 1, 2, 2)), np.zeros(1))


def test_upsample_repeats_and_backward_sums(rng):
    x = rng.normal(size=(2, 3, 2, 3))
    y = layers.upsample_forward(x)
    assert y.shape == (2, 3, 4, 6)
    np.testing.assert_array_equal(y[1, 2, 2:4, 4:6], np.full((2, 2), x[1, 2, 1, 2]))
    dy = rng.normal(size=y.shape)
    dx = layers.upsample_backward(dy)
    assert (y * dy).sum() == pytest.approx((x * dx).sum(), rel=1e-9)
    assert dx[0, 1, 1, 0] == pytest.approx(dy[0, 1, 2:4, 0:2].sum())


def test_softplus_is_stable_and_differentiable():
    x = np.array([-800.0, -1.0, 0.0, 1.0, 800.0])
    y = layers.softplus_forward(x)
    assert np.isfinite(y).all()
    assert y[2] == pytest.approx(np.log(2.0))
    assert y[4] == pytest.approx(800.0)
    grad = layers.softplus_backward(np.ones_like(x), x)
    np.testing.assert_allclose(grad[1:4], 1 / (1 + np.exp(-x[1:4])))


def test_relu_backward_masks():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(layers.relu_backward(np.ones(3), x), [0, 0, 1])
