import numpy as np
import pytest

from i3net.autodiff import Tensor
from i3net.nn import SGD


def param(values, grad):
    p = Tensor(np.array(values, dtype=float), requires_grad=True)
    p.grad = np.array(grad, dtype=float)
    return p


def test_sgd_momentum_and_decay():
    p = param([1.0], [0.5])
    opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.1)
    opt.step()
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.6)
    p.grad = np.array([0.5])
    opt.step()
    v = 0.9 * 0.6 + 0.5 + 0.1 * 0.94
    assert p.data[0] == pytest.approx(0.94 - 0.1 * v)


def test_sgd_skips_params_without_grad():
    p = Tensor(np.ones(2), requires_grad=True)
    SGD([p], lr=1.0).step()
    np.testing.assert_array_equal(p.data, [1.0, 1.0])


def test_clipping_rescales_global_norm():
    a, b = param([0.0, 0.0], [3.0, 0.0]), param([0.0], [4.0])
    opt = SGD([a, b], lr=1.0, momentum=0.0, max_grad_norm=1.0)
    assert opt.grad_norm() == pytest.approx(5.0)
    opt.step()
    np.testing.assert_allclose(a.data, [-0.6, 0.0])
    np.testing.assert_allclose(b.data, [-0.8])


def test_clipping_leaves_small_gradients_bit_identical():
    rng = np.random.default_rng(0)
    g = rng.normal(size=5)
    p1, p2 = param(np.ones(5), g), param(np.ones(5), g)
    SGD([p1], lr=0.1, weight_decay=1e-3).step()
    SGD([p2], lr=0.1, weight_decay=1e-3, max_grad_norm=100.0).step()
    np.testing.assert_array_equal(p1.data, p2.data)


def test_rejects_nonpositive_lr():
    with pytest.raises(ValueError):
        SGD([], lr=0.0)
