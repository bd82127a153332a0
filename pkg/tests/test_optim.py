import numpy as np
import pytest

from cov3d.optim import Adam, AdamState, OptimHyper, adam_step
from cov3d.tensor import Tensor


def one_step(theta, g, hyper, state=None):
    theta = np.array([theta], dtype=np.float64)
    state = state or AdamState.zeros_like([theta])
    (new,), state = adam_step([theta], [np.array([g])], state, hyper)
    return new, state


def test_first_step_hand_value():
    hyper = OptimHyper(learning_rate=1e-4, weight_decay=0.0)
    new, state = one_step(1.0, 0.5, hyper)
    # m_hat = 0.5, v_hat = 0.25
    expected = 1.0 - 1e-4 * 0.5 / (0.5 + 1e-8)
    assert abs(new[0] - expected) < 1e-10
    assert state.t == 1
    assert state.m[0][0] == pytest.approx(0.05) and state.v[0][0] == pytest.approx(0.00025)


def test_zero_gradient_no_decay_is_exact_noop():
    theta = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
    state = AdamState.zeros_like([theta])
    (new,), _ = adam_step([theta], [np.zeros_like(theta)], state, OptimHyper(weight_decay=0.0))
    assert new.tobytes() == theta.tobytes()


def test_coupled_decay_equals_substituted_gradient():
    a_state = b_state = None
    a, b = 1.0, 1.0
    for _ in range(5):
        a_arr, a_state = one_step(a, 0.0, OptimHyper(weight_decay=1e-5), a_state)
        b_arr, b_state = one_step(b, 1e-5 * b, OptimHyper(weight_decay=0.0), b_state)
        a, b = a_arr[0], b_arr[0]
        assert a == b


def test_update_magnitude_bounded():
    rng = np.random.default_rng(1)
    hyper = OptimHyper(learning_rate=1e-3, weight_decay=0.0)
    theta = rng.standard_normal(100)
    state = AdamState.zeros_like([theta])
    for _ in range(50):
        (new,), state = adam_step([theta], [rng.standard_normal(100) * rng.uniform(0, 10)], state, hyper)
        assert np.abs(new - theta).max() <= 10 * hyper.learning_rate
        theta = new


def test_shape_and_hyper_errors():
    theta = np.zeros(3)
    with pytest.raises(ValueError, match="shape mismatch"):
        adam_step([theta], [np.zeros(4)], AdamState.zeros_like([theta]), OptimHyper())
    with pytest.raises(ValueError):
        OptimHyper(learning_rate=0.0)
    with pytest.raises(ValueError):
        OptimHyper(beta1=1.0)


def test_stateful_wrapper_updates_in_place():
    p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    p.grad = np.full(3, 0.5)
    opt = Adam([p], OptimHyper(learning_rate=0.1, weight_decay=0.0))
    opt.step()
    np.testing.assert_allclose(p.data, 0.9, atol=1e-6)
    opt.zero_grad()
    assert p.grad is None
