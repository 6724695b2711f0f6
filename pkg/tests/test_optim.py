import numpy as np
import pytest

from clseg.layers import ContractError
from clseg.optim import AdamState, adam_step


def test_first_step_is_signed_learning_rate():
    w = {"p": np.array([0.0, 0.0])}
    g = {"p": np.array([3.7, -0.002])}
    state = AdamState.for_params(w, learning_rate=1e-3)
    adam_step(w, g, state)
    # first step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    assert np.allclose(w["p"], [-1e-3, 1e-3], rtol=1e-4)
    assert state.step_count == 1


def test_zero_gradient_from_fresh_state_changes_nothing():
    w = {"p": np.array([1.5, -2.0])}
    before = w["p"].copy()
    state = AdamState.for_params(w)
    adam_step(w, {"p": np.zeros(2)}, state)
    assert np.array_equal(w["p"], before)
    assert not state.m["p"].any() and not state.v["p"].any()
    assert state.step_count == 1


def test_five_steps_on_quadratic_strictly_decrease():
    # scalar oracle run: f(w) = w^2 from w = 1 with lr = 0.1
    w = {"w": np.array([1.0])}
    state = AdamState.for_params(w, learning_rate=0.1)
    values = [1.0]
    for _ in range(5):
        adam_step(w, {"w": 2.0 * w["w"]}, state)
        values.append(float(w["w"][0]))
    assert all(b < a for a, b in zip(values, values[1:]))


def test_shape_mismatch_rejected():
    w = {"p": np.zeros(3)}
    state = AdamState.for_params(w)
    with pytest.raises(ContractError):
        adam_step(w, {"p": np.zeros(4)}, state)
    with pytest.raises(ContractError):
        adam_step(w, {"q": np.zeros(3)}, state)


def test_updates_match_reference_formula():
    rng = np.random.default_rng(7)
    w = {"p": rng.standard_normal(5)}
    state = AdamState.for_params(w, learning_rate=0.01)
    ref_w = w["p"].copy()
    m = np.zeros(5)
    v = np.zeros(5)
    for t in range(1, 8):
        g = rng.standard_normal(5)
        adam_step(w, {"p": g.copy()}, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref_w -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert np.allclose(w["p"], ref_w, atol=1e-12)
