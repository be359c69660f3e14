"""Core tape behaviour: recording, backward, broadcasting, determinism."""

import numpy as np
import pytest

from steerdiff import autodiff as ad
from steerdiff.autodiff import AutodiffError, ShapeError, Tensor

from gradcheck import check_gradients, tensor64


def test_sum_gradient_is_ones():
    x = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4), requires_grad=True)
    loss = x.sum()
    ad.backward(loss)
    assert np.array_equal(x.grad, np.ones((3, 4), dtype=np.float32))


def test_quadratic_gradient_is_x():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((5, 7)).astype(np.float32), requires_grad=True)
    loss = ad.mul_const(ad.tsum(ad.mul(x, x)), 0.5)
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, x.data, rtol=1e-6)


def test_backward_outside_recording_rejected():
    x = Tensor(np.zeros(3))
    with pytest.raises(AutodiffError, match="outside a recording"):
        ad.backward(x.sum())


def test_backward_requires_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(AutodiffError, match="scalar"):
        ad.backward(x * 2.0)


def test_no_grad_suppresses_recording():
    x = Tensor(np.ones(4), requires_grad=True)
    with ad.no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad


def test_grad_accumulates_over_reuse():
    x = Tensor(np.array([2.0, 3.0], dtype=np.float64), requires_grad=True)
    loss = (x * x + x).sum()  # d/dx = 2x + 1
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_mixed_dtype_rejected():
    a = Tensor(np.zeros(3, dtype=np.float32))
    b = Tensor(np.zeros(3, dtype=np.float64))
    with pytest.raises(ShapeError, match="mixed dtypes"):
        ad.add(a, b)


@pytest.mark.parametrize("shapes", [((3, 4), (3, 4)), ((3, 4), (1, 4)), ((2, 3, 4), (4,)),
                                    ((5, 1), (1, 6))])
def test_broadcast_add_mul_gradients(shapes):
    rng = np.random.default_rng(hash(shapes) % 2**32)
    a = tensor64(rng, shapes[0])
    b = tensor64(rng, shapes[1])
    r = Tensor(rng.standard_normal(np.broadcast_shapes(*shapes)), dtype=np.float64)
    check_gradients(lambda: ad.tsum(ad.mul(ad.add(a, b), r)), [a, b])
    check_gradients(lambda: ad.tsum(ad.mul(ad.mul(a, b), r)), [a, b])


def test_four_layer_net_matches_finite_differences():
    """Random small MLP: analytic grads vs central differences, rel err < 1e-4."""
    rng = np.random.default_rng(42)
    x = tensor64(rng, (3, 6), requires_grad=False)
    w1, w2, w3, w4 = (tensor64(rng, s, scale=0.6)
                      for s in [(6, 8), (8, 8), (8, 5), (5, 2)])

    def f():
        h = ad.silu(ad.matmul(x, w1))
        h = ad.sigmoid(ad.matmul(h, w2))
        h = ad.silu(ad.matmul(h, w3))
        return ad.tmean(ad.mul(ad.matmul(h, w4), ad.matmul(h, w4)))

    worst = check_gradients(f, [w1, w2, w3, w4])
    assert worst < 1e-4


def test_forward_backward_determinism():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((4, 5)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.standard_normal((5, 3)).astype(np.float32), requires_grad=True)
        loss = ad.tsum(ad.silu(ad.matmul(x, w)))
        ad.backward(loss)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    first, second = run(), run()
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


def test_concat_split_gradients():
    rng = np.random.default_rng(3)
    a = tensor64(rng, (2, 3, 4, 4))
    b = tensor64(rng, (2, 5, 4, 4))
    r = Tensor(rng.standard_normal((2, 8, 4, 4)), dtype=np.float64)
    check_gradients(lambda: ad.tsum(ad.mul(ad.concat([a, b], axis=1), r)), [a, b])


def test_finite_forward_on_finite_inputs():
    rng = np.random.default_rng(11)
    x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32) * 0.3, requires_grad=True)
    y = ad.conv2d(x, w, pad=1)
    assert np.all(np.isfinite(y.data))
