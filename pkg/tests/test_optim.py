import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twophase import core, model as M
from twophase.core import Tensor
from twophase.optim import Adam, AdamState, NonFiniteGradient, adam_step

# Scalar trajectory for p0 = 1, g_t = 2 (p - 3) + sin(t), default hyperparameters.
# Frozen from a separate pure-float reimplementation of the bias-corrected recurrence.
TRAJECTORY = [
    1.000999999996834, 1.0019993548859163, 1.0030014124558702, 1.0040049795862915,
    1.0050134341699335, 1.0060224315568134, 1.007018649246243, 1.0079991744919798,
    1.0089784400137398, 1.0099691697953301,
]


def test_zero_gradient_is_fixed_point():
    params = {"w": np.array([0.5, -1.0]), "b": np.array([2.0])}
    state = AdamState()
    for _ in range(25):
        params, state = adam_step(params, {k: np.zeros_like(v) for k, v in params.items()}, state)
    np.testing.assert_array_equal(params["w"], [0.5, -1.0])
    np.testing.assert_array_equal(params["b"], [2.0])
    assert state.step == 25


def test_first_update_is_minus_lr():
    params, _ = adam_step({"p": np.array([0.0])}, {"p": np.array([1.0])}, AdamState())
    assert math.isclose(params["p"][0], -1e-3, rel_tol=1e-7)


def test_ten_step_trajectory_matches_reference():
    p = np.array([1.0])
    state = AdamState()
    for t in range(1, 11):
        g = 2 * (p - 3.0) + math.sin(t)
        new, state = adam_step({"p": p}, {"p": g}, state)
        p = new["p"]
        assert p[0] == pytest.approx(TRAJECTORY[t - 1], rel=1e-14, abs=0)
    assert state.step == 10
    assert state.first_moment["p"].shape == p.shape == state.second_moment["p"].shape


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_gradient_names_parameter(bad):
    with pytest.raises(NonFiniteGradient) as err:
        adam_step({"ok": np.zeros(2), "conv.w": np.zeros(3)},
                  {"ok": np.zeros(2), "conv.w": np.array([0.0, bad, 1.0])}, AdamState())
    assert err.value.name == "conv.w"


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        adam_step({"p": np.zeros(2)}, {"p": np.zeros(3)}, AdamState())


def test_missing_gradient_leaves_parameter_alone():
    params = {"a": np.ones(2), "b": np.ones(2)}
    new, state = adam_step(params, {"a": np.ones(2)}, AdamState())
    assert new["b"] is params["b"]
    assert "b" not in state.first_moment


def test_hyperparameters_are_overridable():
    state = AdamState(learning_rate=0.1, beta1=0.5, beta2=0.9, epsilon=1e-3)
    new, _ = adam_step({"p": np.array([0.0])}, {"p": np.array([2.0])}, state)
    # step 1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    assert new["p"][0] == pytest.approx(-0.1 * 2.0 / (2.0 + 1e-3), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-3))
def test_first_step_magnitude_bounded_by_lr(g):
    new, _ = adam_step({"p": np.array([0.0])}, {"p": np.array([g])}, AdamState())
    assert abs(new["p"][0]) <= 1e-3 * (1 + 1e-9)
    assert np.sign(new["p"][0]) == -np.sign(g)


def _train_steps(seed, steps=5):
    spec = M.ModelSpec((8, 8, 3), (M.StageSpec(1, 4), M.StageSpec(1, 8)), 3)
    model = M.build(spec, seed)
    opt = Adam(model.params)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 8, 8, 3)).astype(np.float32)
    y = np.array([0, 1, 2, 0])
    for _ in range(steps):
        opt.zero_grad()
        core.softmax_cross_entropy(model.forward(x), y).backward()
        opt.step()
    return model.state_dict()


def test_identical_seeds_give_bit_identical_parameters():
    a, b = _train_steps(3), _train_steps(3)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    c = _train_steps(4)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_optimizer_skips_frozen_tensors():
    w = Tensor(np.ones((2, 2)), requires_grad=False)
    v = Tensor(np.ones((2, 2)), requires_grad=True)
    opt = Adam({"w": w, "v": v})
    w.grad = np.ones((2, 2))
    v.grad = np.ones((2, 2))
    opt.step()
    np.testing.assert_array_equal(w.data, np.ones((2, 2)))
    assert np.all(v.data < 1)
