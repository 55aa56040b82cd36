import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbcnn import autodiff as ad
from mbcnn.autodiff import ShapeError, grad_check
from mbcnn.layers import (
    ConvParams,
    FcParams,
    conv2d,
    fully_connected,
    global_avg_pool,
    pixel_shuffle,
    pixel_unshuffle,
    receptive_field,
)


def naive_conv(x, k, b, stride, dilation):
    """Direct nested-loop convolution with 'same' zero padding."""
    n, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    ph, pw = dilation * (kh // 2), dilation * (kw // 2)
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    ho, wo = -(-h // stride), -(-w // stride)
    out = np.zeros((n, ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for u in range(kh):
                for v in range(kw):
                    patch = xp[:, i * stride + u * dilation, j * stride + v * dilation, :]
                    out[:, i, j, :] += patch @ k[u, v]
    return out + (0 if b is None else b)


def test_conv_1x1_scaling():
    x = np.array([1.0, 2.0, 3.0]).reshape(1, 1, 3, 1)
    out = conv2d(ad.Tensor(x), ad.Tensor(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data.ravel(), [2, 4, 6])


def test_conv_bias_only():
    x = np.random.default_rng(0).normal(size=(1, 5, 5, 2))
    out = conv2d(ad.Tensor(x), ad.Tensor(np.zeros((3, 3, 2, 4))), ad.Tensor(np.ones(4)))
    np.testing.assert_array_equal(out.data, np.ones((1, 5, 5, 4)))


@pytest.mark.parametrize("stride, dilation", [(1, 1), (1, 2), (2, 1), (2, 3)])
def test_conv_matches_naive_oracle(stride, dilation):
    rng = np.random.default_rng(stride * 10 + dilation)
    x, k, b = rng.normal(size=(2, 5, 5, 3)), rng.normal(size=(3, 3, 3, 4)), rng.normal(size=4)
    out = conv2d(ad.Tensor(x), ad.Tensor(k), ad.Tensor(b), stride=stride, dilation=dilation)
    np.testing.assert_allclose(out.data, naive_conv(x, k, b, stride, dilation), atol=1e-6)


def test_conv_valid_padding_shape():
    x = np.zeros((1, 8, 6, 2))
    assert conv2d(ad.Tensor(x), ad.Tensor(np.zeros((3, 3, 2, 1))), padding="none").shape == (1, 6, 4, 1)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(ad.Tensor(np.zeros((1, 4, 4, 2))), ad.Tensor(np.zeros((3, 3, 3, 1))))


def test_conv_gradcheck_small():
    rng = np.random.default_rng(7)
    err = grad_check(lambda x, k: ad.sum_(conv2d(x, k)), rng.normal(size=(1, 4, 4, 2)),
                     rng.normal(size=(3, 3, 2, 2)))
    assert err < 1e-4


def test_conv_params_validation():
    with pytest.raises(ValueError):
        ConvParams(np.zeros((2, 2, 1, 1)), np.zeros(1))
    with pytest.raises(ValueError):
        ConvParams(np.zeros((3, 3, 1, 2)), np.zeros(3))


def test_he_uniform_init_bounds():
    p = ConvParams.init(np.random.default_rng(0), 3, 8, 16)
    bound = np.sqrt(6 / 72)
    assert np.abs(p.kernel).max() <= bound
    assert np.abs(p.kernel).max() > 0.9 * bound
    assert not p.bias.any()


def test_receptive_field():
    assert receptive_field(3, 1) == 3
    assert receptive_field(3, 3) == 7


def test_fully_connected_identity_and_arithmetic():
    x = np.random.default_rng(1).normal(size=(2, 1, 1, 3))
    out = fully_connected(ad.Tensor(x), ad.Tensor(np.eye(3)), ad.Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)
    out = fully_connected(ad.Tensor(np.ones((1, 1, 1, 2))), ad.Tensor(np.ones((2, 1))),
                          ad.Tensor(np.ones(1)))
    assert out.data.ravel()[0] == 3.0
    with pytest.raises(ShapeError):
        fully_connected(ad.Tensor(np.ones((1, 1, 1, 3))), ad.Tensor(np.ones((2, 1))))


def test_fully_connected_gradcheck():
    rng = np.random.default_rng(2)
    err = grad_check(lambda x, w, b: ad.sum_(fully_connected(x, w, b)),
                     rng.normal(size=(3, 1, 1, 4)), rng.normal(size=(4, 3)), rng.normal(size=3))
    assert err < 1e-6


def test_fc_params_validation():
    with pytest.raises(ValueError):
        FcParams(np.zeros((3, 2)), np.zeros(3))


def test_global_avg_pool_values():
    out = global_avg_pool(ad.Tensor(np.full((1, 3, 3, 2), 7.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 1, 2), 7.0))
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2, 1)
    assert global_avg_pool(ad.Tensor(x)).data.ravel()[0] == 2.5


def test_global_avg_pool_gradcheck():
    x = np.random.default_rng(3).normal(size=(2, 3, 3, 2))
    assert grad_check(lambda v: ad.sum_(global_avg_pool(v)), x) < 1e-6


def test_pixel_shuffle_index_rule():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4)
    out = pixel_shuffle(ad.Tensor(x), 2).data[0, :, :, 0]
    np.testing.assert_array_equal(out, [[1, 2], [3, 4]])
    assert pixel_shuffle(ad.Tensor(np.zeros((1, 8, 8, 12))), 2).shape == (1, 16, 16, 3)


def test_pixel_shuffle_general_rule():
    r, c = 3, 2
    x = np.random.default_rng(4).normal(size=(1, 2, 3, c * r * r))
    out = pixel_shuffle(ad.Tensor(x), r).data
    for y in range(out.shape[1]):
        for xx in range(out.shape[2]):
            for ch in range(c):
                assert out[0, y, xx, ch] == x[0, y // r, xx // r, ch * r * r + (y % r) * r + xx % r]


def test_pixel_unshuffle_shapes_and_errors():
    assert pixel_unshuffle(ad.Tensor(np.zeros((1, 256, 256, 3))), 2).shape == (1, 128, 128, 12)
    const = pixel_unshuffle(ad.Tensor(np.full((1, 4, 4, 1), 0.3)), 2).data
    np.testing.assert_array_equal(const, np.full((1, 2, 2, 4), 0.3))
    with pytest.raises(ShapeError):
        pixel_unshuffle(ad.Tensor(np.zeros((1, 3, 4, 1))), 2)
    with pytest.raises(ShapeError):
        pixel_shuffle(ad.Tensor(np.zeros((1, 2, 2, 3))), 2)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(2, 3))
def test_shuffle_roundtrip(n, h, w, c, r):
    x = np.random.default_rng(h * 31 + w).normal(size=(n, h * r, w * r, c))
    back = pixel_shuffle(pixel_unshuffle(ad.Tensor(x), r), r).data
    assert np.array_equal(back, x)
