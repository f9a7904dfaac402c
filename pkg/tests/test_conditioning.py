import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nwm.autodiff import precision
from nwm.conditioning import (ConditionEmbedder, compose_actions, compose_actions_se2, frequencies,
                              sincos_features)
from nwm.world import Pose, integrate_actions, wrap_angle

small_action = st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(-3, 3), st.floats(-1, 1))


def test_features_at_zero():
    f = sincos_features(0.0, 8)
    assert f.shape == (16,)
    np.testing.assert_array_equal(f[:8], 0.0)
    np.testing.assert_array_equal(f[8:], 1.0)


@given(st.floats(-1e3, 1e3))
def test_features_in_unit_range(v):
    f = sincos_features(v)
    assert np.all(np.abs(f) <= 1.0)


@given(st.floats(-50, 50))
def test_features_periodic_in_first_frequency(v):
    w0 = frequencies(8)[0]
    a, b = sincos_features(v), sincos_features(v + 2 * math.pi / w0)
    assert a[0] == pytest.approx(b[0], abs=1e-9)
    assert a[8] == pytest.approx(b[8], abs=1e-9)


def embedder(seed=0, **kw):
    with precision(np.float64):
        return ConditionEmbedder(16, np.random.default_rng(seed), **kw)


def test_zero_weights_give_bias_sum():
    emb = embedder()
    for name, p in emb.named_parameters():
        if name.endswith("weight"):
            p.data[...] = 0.0
        else:
            p.data[...] = np.random.default_rng(hash(name) % 2**32).normal(size=p.shape)
    bias_sum = 2 * emb.g_u.fc2.bias.data + emb.g_phi.fc2.bias.data + emb.g_k.fc2.bias.data \
        + emb.g_t.fc2.bias.data
    for action, t in [([0.3, -0.1, 0.5, 0.25], 7), ([5.0, 2.0, -3.0, -1.0], 99)]:
        xi = emb(np.array([t]), np.array([action])).data[0]
        np.testing.assert_allclose(xi, bias_sum, atol=1e-14)


def test_action_none_equals_disabled_action():
    a = embedder(3)
    b = embedder(3, use_action=False)
    action = np.array([[0.4, -0.2, 0.3, 0.5]])
    np.testing.assert_array_equal(a(np.array([5]), None, shift=0.5).data,
                                  b(np.array([5]), action).data)


def test_termwise_oracle():
    emb = embedder(1)
    rng = np.random.default_rng(2)
    action = rng.normal(size=(3, 4))
    t = np.array([0, 41, 99])
    xi = emb(t, action).data
    f = lambda v: sincos_features(v)
    mlp = lambda g, x: (lambda h: (h / (1 + np.exp(-h))) @ g.fc2.weight.data + g.fc2.bias.data)(
        x @ g.fc1.weight.data + g.fc1.bias.data)
    ref = (mlp(emb.g_u, f(action[:, 0])) + mlp(emb.g_u, f(action[:, 1]))
           + mlp(emb.g_phi, f(action[:, 2])) + mlp(emb.g_k, f(action[:, 3])) + mlp(emb.g_t, f(t)))
    np.testing.assert_allclose(xi, ref, rtol=0, atol=1e-12)


def test_removing_term_changes_xi_by_that_term():
    emb = embedder(4)
    action = np.array([[0.5, 0.1, -0.2, 0.75]])
    t = np.array([10])
    full = emb(t, action).data
    terms = emb.terms(t, action)
    without_time = embedder(4, use_time=False)(t, action).data
    np.testing.assert_allclose(full - without_time, terms["k"].data, atol=1e-12)
    time_only = embedder(4, use_action=False)(t, action).data
    np.testing.assert_allclose(full - time_only,
                               terms["u_x"].data + terms["u_y"].data + terms["phi"].data, atol=1e-12)


def test_output_dim_and_t_range():
    emb = embedder()
    assert emb(np.array([0, 1]), np.zeros((2, 4))).shape == (2, 16)
    with pytest.raises(ValueError):
        emb(np.array([100]), np.zeros((1, 4)))
    with pytest.raises(ValueError):
        emb(np.array([-1]), np.zeros((1, 4)))


# --- composition ---

def test_compose_single_is_identity():
    a = np.array([0.3, -0.2, 1.1, 0.25])
    np.testing.assert_array_equal(compose_actions([a]), a)


def test_compose_three_half_turns():
    out = compose_actions([[0, 0, math.pi, 0.25]] * 3)
    assert out[2] == pytest.approx(-math.pi) or out[2] == pytest.approx(math.pi)
    assert -math.pi <= out[2] < math.pi


def test_compose_empty_raises():
    with pytest.raises(ValueError):
        compose_actions([])
    with pytest.raises(ValueError):
        compose_actions_se2([])


@given(st.lists(small_action, min_size=1, max_size=8), st.lists(small_action, min_size=1, max_size=8))
@settings(max_examples=100)
def test_compose_additivity(a, b):
    whole = compose_actions(a + b)
    parts = compose_actions([compose_actions(a), compose_actions(b)])
    np.testing.assert_allclose(whole[[0, 1, 3]], parts[[0, 1, 3]], atol=1e-12)
    assert abs(wrap_angle(whole[2] - parts[2])) < 1e-12


def test_se2_oracle_and_summation_gap():
    rng = np.random.default_rng(0)
    actions = np.column_stack([rng.uniform(0, 0.2, 20), rng.normal(0, 0.05, 20),
                               rng.normal(0, 0.1, 20), np.full(20, 0.25)])
    end = integrate_actions(Pose(0, 0, 0), actions, 1.0)[-1]
    exact = compose_actions_se2(actions)
    summed = compose_actions(actions)
    np.testing.assert_allclose(exact[:2], end[:2], atol=1e-12)
    # rotation agrees between the summation and the integrated pose
    assert abs(wrap_angle(summed[2] - end[2])) < 1e-12
    # translation does not: the summation ignores inter-step rotation
    gap = np.linalg.norm(summed[:2] - end[:2])
    assert gap > 1e-3
    assert summed[3] == pytest.approx(5.0)
