import numpy as np
import pytest

from cov3d.tensor import Tensor, float64_mode, get_dtype, no_grad


def test_default_dtype_is_float32():
    assert get_dtype() is np.float32
    assert Tensor([1.0, 2.0]).dtype == np.float32


def test_float64_mode_is_scoped():
    with float64_mode():
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_sum_gives_ones_gradient():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_zero_branch_contributes_nothing():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    y = Tensor([4.0, 5.0, 6.0], requires_grad=True)
    loss = (x * 2.0).sum() + (y * 0.0).sum()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(y.grad, [0.0, 0.0, 0.0])


def test_unreachable_leaf_untouched():
    x = Tensor([1.0], requires_grad=True)
    z = Tensor([1.0], requires_grad=True)
    (x * 3.0).sum().backward()
    assert z.grad is None


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(RuntimeError, match="scalar"):
        (x * 2.0).backward()


def test_second_backward_is_an_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(RuntimeError, match="already released"):
        loss.backward()


def test_shared_subexpression_visited_once():
    # loss = sum(y * y) with y = 3x  ->  d/dx = 18x
    x = Tensor([1.0, -2.0], requires_grad=True)
    y = x * 3.0
    (y * y).sum().backward()
    np.testing.assert_allclose(x.grad, [18.0, -36.0])


def test_broadcast_mul_unbroadcasts_gradient():
    a = Tensor(np.ones((2, 3, 4)), requires_grad=True)
    b = Tensor(np.full((1, 3, 1), 2.0), requires_grad=True)
    (a * b).sum().backward()
    assert b.grad.shape == (1, 3, 1)
    np.testing.assert_allclose(b.grad, np.full((1, 3, 1), 8.0))
    np.testing.assert_allclose(a.grad, np.full((2, 3, 4), 2.0))


def test_reshape_transpose_roundtrip_gradient():
    x = Tensor(np.arange(24.0).reshape(2, 3, 4), requires_grad=True)
    w = Tensor(np.arange(24.0).reshape(4, 2, 3))
    (x.transpose(2, 0, 1) * w).sum().backward()
    np.testing.assert_allclose(x.grad, w.data.transpose(1, 2, 0))


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert y.is_leaf


def test_leaf_gradients_accumulate_across_passes():
    x = Tensor([1.0, 1.0], requires_grad=True)
    (x * 2.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, [5.0, 5.0])
