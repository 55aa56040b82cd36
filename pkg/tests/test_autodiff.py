import numpy as np
import pytest

from mbcnn import autodiff as ad
from mbcnn.autodiff import ShapeError, Tape, backward, grad_check


def t4(values):
    return np.asarray(values, dtype=np.float64).reshape(1, 1, -1, 1)


def grads_of(fn, *arrays):
    tape = Tape("double")
    vs = [tape.variable(a) for a in arrays]
    g = backward(tape, fn(*vs))
    return [g.get(v.node) for v in vs]


def test_add_values_and_gradient():
    tape = Tape("double")
    a, b = tape.variable(t4([1, 2])), tape.variable(t4([3, 4]))
    out = ad.add(a, b)
    np.testing.assert_array_equal(out.data.ravel(), [4, 6])
    g = backward(tape, ad.sum_(out))
    np.testing.assert_array_equal(g[a.node], np.ones_like(a.data))


def test_add_zero_is_identity():
    x = np.random.default_rng(0).normal(size=(2, 3, 3, 2))
    out = ad.add(ad.Tensor(x), ad.Tensor(np.zeros_like(x)))
    np.testing.assert_array_equal(out.data, x)


def test_add_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.add(ad.Tensor(np.zeros((1, 2, 2, 1))), ad.Tensor(np.zeros((1, 2, 3, 1))))


@pytest.mark.parametrize("s, expected", [(0.0, [0, 0, 0]), (1.0, [1, 2, 3])])
def test_scale_values(s, expected):
    out = ad.scale(ad.Tensor(t4([1, 2, 3])), s)
    np.testing.assert_array_equal(out.data.ravel(), expected)


def test_scale_gradient_wrt_scalar():
    _, gs = grads_of(lambda x, s: ad.sum_(ad.scale(x, s)), t4([1, 2, 3]), np.array([0.5]))
    assert gs.shape == (1,)
    assert gs[0] == pytest.approx(6.0)


def test_scale_rejects_vector():
    with pytest.raises(ShapeError):
        ad.scale(ad.Tensor(t4([1, 2])), np.array([1.0, 2.0]))


def test_relu_values_and_subgradient():
    out = ad.relu(ad.Tensor(t4([-1, 0, 2])))
    np.testing.assert_array_equal(out.data.ravel(), [0, 0, 2])
    (g,) = grads_of(lambda x: ad.sum_(ad.relu(x)), t4([-1, 2]))
    np.testing.assert_array_equal(g.ravel(), [0, 1])
    (g0,) = grads_of(lambda x: ad.sum_(ad.relu(x)), t4([0.0]))
    assert g0.ravel()[0] == 0


def test_mul_elementwise_broadcast():
    a = np.ones((1, 2, 2, 1))
    out = ad.mul_elementwise(ad.Tensor(a), ad.Tensor(np.full((1, 1, 1, 1), 3.0)))
    np.testing.assert_array_equal(out.data, np.full_like(a, 3.0))
    _, gb = grads_of(lambda x, y: ad.sum_(ad.mul_elementwise(x, y)), a, np.full((1, 1, 1, 1), 3.0))
    np.testing.assert_array_equal(gb.ravel(), [4.0])


def test_mul_elementwise_ones_identity():
    a = np.random.default_rng(1).normal(size=(2, 3, 3, 4))
    out = ad.mul_elementwise(ad.Tensor(a), ad.Tensor(np.ones((2, 1, 1, 4))))
    np.testing.assert_array_equal(out.data, a)


def test_mul_elementwise_channel_mismatch():
    with pytest.raises(ShapeError):
        ad.mul_elementwise(ad.Tensor(np.ones((1, 2, 2, 3))), ad.Tensor(np.ones((1, 1, 1, 2))))


def test_concat_channels_shapes():
    out = ad.concat_channels([ad.Tensor(np.zeros((1, 4, 4, 8))), ad.Tensor(np.zeros((1, 4, 4, 3)))])
    assert out.shape == (1, 4, 4, 11)
    x = np.random.default_rng(2).normal(size=(1, 3, 3, 2))
    np.testing.assert_array_equal(ad.concat_channels([ad.Tensor(x)]).data, x)
    with pytest.raises(ShapeError):
        ad.concat_channels([ad.Tensor(np.zeros((1, 4, 4, 1))), ad.Tensor(np.zeros((1, 3, 4, 1)))])


def test_backward_sum_gives_ones():
    x = np.random.default_rng(3).normal(size=(2, 3, 4, 5))
    (g,) = grads_of(ad.sum_, x)
    np.testing.assert_array_equal(g, np.ones_like(x))


def test_backward_dead_relu_gives_zeros():
    x = -np.random.default_rng(4).uniform(0.1, 1, size=(1, 3, 3, 2))
    (g,) = grads_of(lambda v: ad.sum_(ad.relu(v)), x)
    np.testing.assert_array_equal(g, np.zeros_like(x))


def test_backward_is_deterministic():
    x = np.random.default_rng(5).normal(size=(1, 4, 4, 3))
    f = lambda v: ad.mean(ad.mul_elementwise(ad.relu(v), v))  # noqa: E731
    a, = grads_of(f, x)
    b, = grads_of(f, x)
    assert np.array_equal(a, b)


def test_backward_rejects_non_scalar():
    tape = Tape()
    x = tape.variable(np.ones((1, 2, 2, 1)))
    with pytest.raises(ShapeError):
        backward(tape, ad.relu(x))


def test_mixed_tapes_rejected():
    a = Tape().variable(np.ones((1, 2, 2, 1)))
    b = Tape().variable(np.ones((1, 2, 2, 1)))
    with pytest.raises(ValueError):
        ad.add(a, b)


def test_single_mode_is_float32_double_is_float64():
    assert Tape("single").variable([1.0]).data.dtype == np.float32
    assert Tape("double").variable([1.0]).data.dtype == np.float64
    with pytest.raises(ValueError):
        Tape("half")


def test_non_recording_tape_gives_constants():
    tape = Tape(record=False)
    x = tape.variable(np.ones((1, 1, 1, 1)))
    assert not x.requires_grad
    assert len(tape) == 0


def test_grad_check_square():
    err = grad_check(lambda x: ad.sum_(ad.mul_elementwise(x, x)), t4([1.0, 2.0]))
    assert err < 1e-6


def test_grad_check_linear_is_exact():
    w = np.random.default_rng(6).normal(size=(1, 3, 3, 2))
    err = grad_check(lambda x: ad.sum_(ad.mul_elementwise(x, ad.Tensor(w))), np.ones_like(w))
    assert err < 1e-8


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(ad.sum_, t4([1.0]), eps=1e-2)
