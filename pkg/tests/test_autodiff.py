import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from i3net import autodiff as ad
from i3net.autodiff import ShapeError, Tensor, grad_check


def rand(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


# ---------------------------------------------------------------- examples
def test_softmax_temperature_symmetric_logits():
    p = ad.softmax(Tensor([0.0, 0.0]), temperature=2.0)
    np.testing.assert_array_equal(p.data, [0.5, 0.5])


def test_conv2d_scalar_product():
    out = ad.conv2d(Tensor(np.full((1, 1, 1, 1), 3.0)), Tensor(np.full((1, 1, 1, 1), 2.0)))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 6.0


def test_matmul_hand_product():
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_grad_reverse_forward_identity():
    assert ad.grad_reverse(Tensor(3.0)).item() == 3.0


@pytest.mark.parametrize("upstream,beta,expected", [(1.0, 1.0, -1.0), (2.0, 0.5, -1.0)])
def test_grad_reverse_backward(upstream, beta, expected):
    x = Tensor(3.0, requires_grad=True)
    (ad.grad_reverse(x, beta) * upstream).backward()
    assert x.grad == expected


def test_grad_reverse_beta_zero_blocks_gradient():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    ad.tsum(ad.square(ad.grad_reverse(x * 3.0, 0.0))).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_grad_reverse_rejects_negative_beta():
    with pytest.raises(ValueError):
        ad.grad_reverse(Tensor(1.0), -0.5)


def test_grad_check_square():
    err = grad_check(lambda x: ad.tsum(ad.square(x)), np.array([3.0]), eps=1e-5)
    x = Tensor([3.0], requires_grad=True)
    ad.tsum(ad.square(x)).backward()
    assert x.grad[0] == 6.0
    assert err < 1e-6


def test_grad_check_constant():
    assert grad_check(lambda x: Tensor(4.0) + ad.tsum(x) * 0.0, np.array([1.0, 2.0])) == 0.0


def test_softmax_cross_entropy_gradient():
    x = Tensor(np.zeros(2), requires_grad=True)
    loss = -ad.tsum(ad.log_softmax(x) * np.array([1.0, 0.0]))
    loss.backward()
    np.testing.assert_allclose(x.grad, [-0.5, 0.5], atol=1e-15)
    assert grad_check(lambda t: -ad.tsum(ad.log_softmax(t) * np.array([1.0, 0.0])), np.zeros(2)) < 1e-6


def test_grad_check_rejects_nonscalar_and_bad_eps():
    with pytest.raises(ShapeError):
        grad_check(lambda x: x * 2.0, np.ones(3))
    with pytest.raises(ValueError):
        grad_check(lambda x: ad.tsum(x), np.ones(3), eps=1e-2)


def test_nonscalar_backward_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


@pytest.mark.parametrize("fn", [
    lambda: ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,)))),
    lambda: ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))),
    lambda: ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3)))),
    lambda: ad.reshape(Tensor(np.ones(6)), (4, 2)),
    lambda: ad.concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 3)))], axis=0),
])
def test_shape_mismatch_rejected(fn):
    with pytest.raises(ShapeError):
        fn()


def test_accumulates_over_shared_subexpressions():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    (y + y * x).backward()  # d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad == 2 * 2.0 + 3 * 4.0


# ---------------------------------------------------------------- gradients
OPS = {
    "add_broadcast": (lambda x: ad.tsum(ad.add(x, np.arange(3.0)) ** 2), (4, 3)),
    "sub": (lambda x: ad.tsum(ad.square(ad.sub(1.0, x))), (3, 2)),
    "mul": (lambda x: ad.tsum(ad.mul(x, x[::-1]) * 0.7), (5,)),
    "div": (lambda x: ad.tsum(ad.div(x, 2.5 + x * x)), (4,)),
    "matmul": (lambda x: ad.tsum(ad.square(ad.matmul(x, np.linspace(-1, 1, 12).reshape(3, 4)))), (2, 3)),
    "matmul_batched": (lambda x: ad.tsum(ad.matmul(np.ones((2, 3)), x.reshape(4, 3, 2)) ** 2), (24,)),
    "exp_log": (lambda x: ad.tsum(ad.log(ad.exp(x) + 1.0)), (6,)),
    "relu": (lambda x: ad.tsum(ad.square(ad.relu(x + 0.05))), (7,)),
    "sigmoid": (lambda x: ad.tsum(ad.sigmoid(x * 3.0)), (6,)),
    "log_sigmoid": (lambda x: ad.tsum(ad.log_sigmoid(x * 4.0)), (6,)),
    "softmax_T": (lambda x: ad.tsum(ad.softmax(x, axis=-1, temperature=2.0) * np.arange(4.0)), (3, 4)),
    "log_softmax_T": (lambda x: ad.tsum(ad.log_softmax(x, axis=0, temperature=0.5) * np.arange(3.0)[:, None]), (3, 2)),
    "l2_norm": (lambda x: ad.l2_norm(x + 0.5), (5,)),
    "l2_norm_axis": (lambda x: ad.tsum(ad.l2_norm(x + 0.5, axis=1)), (2, 4)),
    "mean": (lambda x: ad.mean(ad.square(x), axis=0).sum(), (3, 3)),
    "slice_reshape": (lambda x: ad.tsum(ad.square(x[1:, ::2].reshape(-1))), (4, 4)),
    "fancy_index": (lambda x: ad.tsum(ad.square(x[np.array([0, 2, 2])])), (4,)),
    "concat": (lambda x: ad.tsum(ad.square(ad.concat([x, x * 2.0], axis=1))), (2, 3)),
    "transpose": (lambda x: ad.tsum(ad.transpose(x, (1, 0)) * np.arange(6.0).reshape(3, 2)), (2, 3)),
    "sqrt": (lambda x: ad.tsum(ad.sqrt(x * x + 1.0)), (4,)),
    "smooth_l1": (lambda x: ad.tsum(ad.smooth_l1(x * 0.8)), (6,)),
    "conv2d": (lambda x: ad.tsum(ad.square(ad.conv2d(x.reshape(1, 2, 4, 4), np.linspace(-1, 1, 54).reshape(3, 2, 3, 3),
                                                      None, stride=1, padding=1))), (32,)),
    "conv2d_stride": (lambda x: ad.tsum(ad.square(ad.conv2d(x.reshape(2, 1, 5, 5), np.linspace(-1, 1, 9).reshape(1, 1, 3, 3),
                                                             None, stride=2, padding=1))), (50,)),
    "max_pool": (lambda x: ad.tsum(ad.square(ad.max_pool2d(x.reshape(1, 1, 4, 4), 2))), (16,)),
    "hadamard": (lambda x: ad.tsum(ad.hadamard(x, x * 0.5 + 1.0)), (5,)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    fn, shape = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        assert grad_check(fn, rand(rng, *shape), eps=1e-5) < 1e-4


def test_conv_weight_and_bias_gradients():
    rng = np.random.default_rng(0)
    x = rand(rng, 2, 3, 5, 5)
    w = Tensor(rand(rng, 4, 3, 3, 3), requires_grad=True)
    b = Tensor(rand(rng, 4), requires_grad=True)
    err = ad.parameters_grad_check(lambda: ad.tsum(ad.square(ad.conv2d(x, w, b, stride=2, padding=1))), [w, b])
    assert err < 1e-4


# ---------------------------------------------------------------- properties
@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 20.0), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(temperature, seed):
    rng = np.random.default_rng(seed)
    p = ad.softmax(Tensor(rng.normal(scale=10, size=(5, 7))), axis=-1, temperature=temperature)
    np.testing.assert_allclose(p.data.sum(axis=-1), 1.0, atol=1e-12)


def test_deterministic_forward_and_backward():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rand(rng, 2, 3, 6, 6), requires_grad=True)
        w = Tensor(rand(rng, 4, 3, 3, 3), requires_grad=True)
        y = ad.relu(ad.conv2d(x, w, padding=1))
        loss = ad.tsum(ad.softmax(y.reshape(2, -1), temperature=2.0) * np.arange(144.0))
        loss.backward()
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_forward_values_finite_on_finite_input():
    x = Tensor(np.array([-800.0, 0.0, 800.0]))
    for out in (ad.sigmoid(x), ad.log_sigmoid(x), ad.softmax(x), ad.log_softmax(x)):
        assert np.all(np.isfinite(out.data))


def test_max_pool_values():
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    np.testing.assert_array_equal(ad.max_pool2d(x, 2).data[0, 0], [[5.0, 7.0], [13.0, 15.0]])
