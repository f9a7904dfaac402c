import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import randomize
from nwm.cdit import ModelConfig, WorldModel, encode
from nwm.conditioning import compose_actions
from nwm.features import score_bound
from nwm.planner import (CONSTRAINTS, CEMConfig, EnergySpec, LearnedSimulator, OracleSimulator, cem_plan,
                         constraint_mask, endpoint_pose, energy, evaluate, expand_endpoint, pose_error,
                         rank_trajectories)
from nwm.world import Pose, empty_room, render

ROOM = empty_room(8)
START = Pose(4.0, 4.0, 0.4)
coord = st.floats(-2, 2, allow_nan=False).filter(lambda v: abs(v) > 1e-6)


def oracle(start=START):
    return OracleSimulator(ROOM, start, 1.0)


def goal_spec(pose, **kw):
    return EnergySpec(render(ROOM, pose), **kw)


def tiny_simulator(seed=0):
    cfg = ModelConfig(depth=1, dim=16, heads=2, patch_size=4, height=8, width=8, context=2, diffusion_steps=20)
    model = WorldModel(cfg, np.random.default_rng(seed))
    randomize(model, seed)
    ctx = encode(np.random.default_rng(seed + 1).random((2, 8, 8, 3)), cfg)
    return LearnedSimulator(model, ctx, num_steps=2)


# --- expansion ---

def test_even_split_example():
    out = expand_endpoint(0.8, 0.0, 0.0, 8)
    assert out.shape == (8, 4)
    assert np.array_equal(out[:, :3], np.tile([0.1, 0.0, 0.0], (8, 1)))
    assert np.all(out[:, 3] == 0.25)


def test_forward_first_pattern():
    out = expand_endpoint(1.0, 0.6, 0.3, 8, "forward-first")
    assert np.all(out[:5, 1] == 0.0) and np.all(out[5:, 0] == 0.0)
    np.testing.assert_allclose(out[:5, 0], 0.2)
    np.testing.assert_allclose(out[5:, 1], 0.2)


def test_left_right_first_pattern():
    out = expand_endpoint(1.0, 0.6, 0.3, 8, "left-right-first")
    assert np.all(out[:3, 0] == 0.0) and np.all(out[3:, 1] == 0.0)


def test_straight_then_forward_pattern():
    out = expand_endpoint(0.8, 0.6, 0.3, 8, "straight-then-forward")
    assert np.all(out[3:, 1] == 0.0)
    assert np.all(out[:3, 1] != 0.0) and np.all(out[:, 0] != 0.0)


@given(coord, coord, st.floats(-3, 3), st.sampled_from(CONSTRAINTS), st.integers(1, 12))
@settings(max_examples=200, deadline=None)
def test_expansion_composes_to_endpoint_with_exact_zeros(dx, dy, yaw, constraint, steps):
    out = expand_endpoint(dx, dy, yaw, steps, constraint)
    np.testing.assert_allclose(compose_actions(out)[:3], [dx, dy, math.remainder(yaw, 2 * math.pi)], atol=1e-12)
    mask = constraint_mask(steps, constraint)
    assert np.all(out[:, :2][mask] == 0.0)
    assert np.all(out[:, :2][~mask] != 0.0)
    assert np.all(out[:-1, 2] == 0.0)


def test_expansion_errors():
    with pytest.raises(ValueError):
        expand_endpoint(1, 0, 0, 8, "diagonal-first")
    with pytest.raises(ValueError):
        expand_endpoint(1, 0, 0, 0)


# --- configs ---

def test_config_validation():
    assert CEMConfig().elites == 12
    assert CEMConfig(population=3, elite_fraction=0.1).elites == 1
    for bad in (dict(population=0), dict(elite_fraction=0.0), dict(var=(0.1, 0.0, 0.1)), dict(constraint="x")):
        with pytest.raises(ValueError):
            CEMConfig(**bad)
    goal = np.zeros((4, 4, 3))
    with pytest.raises(ValueError):
        EnergySpec(goal, penalty=score_bound())
    with pytest.raises(ValueError):
        EnergySpec(goal, evals=0)
    with pytest.raises(ValueError):
        EnergySpec(goal, similarity_scale=10.0, penalty=15.0)


# --- energy ---

def test_zero_actions_at_goal_have_zero_energy():
    assert energy(oracle(), expand_endpoint(0, 0, 0), goal_spec(START)) == 0.0


def test_invalid_action_dominates():
    actions = expand_endpoint(0.0, 0.0, 0.0)
    spec = goal_spec(START, valid_action=lambda a: abs(a[1]) < 0.5)
    actions[2, 1] = 1e-9  # still valid
    assert energy(oracle(), actions, spec) < 1e-3
    actions[4, 1] = 0.9
    assert energy(oracle(), actions, spec) >= spec.penalty


def test_unsafe_states_are_counted_per_state():
    spec = goal_spec(START, safe_state=lambda frame: False, evals=1)
    e = energy(oracle(), expand_endpoint(0, 0, 0, 5), spec)
    assert e == pytest.approx(5 * spec.penalty)


def test_penalised_candidates_lose_to_every_valid_one():
    spec = goal_spec(START, valid_action=lambda a: a[0] >= 0, evals=1)
    good = [expand_endpoint(dx, 0.2, 0.5) for dx in (0.1, 0.6, 1.0)]
    bad = expand_endpoint(-0.1, 0.0, 0.0)
    ranked = rank_trajectories(oracle(), [bad] + good, spec)
    assert ranked[-1].index == 0
    assert max(r.energy for r in ranked[:-1]) < ranked[-1].energy


def test_mean_of_evaluations_decomposes():
    sim = tiny_simulator()
    goal = np.random.default_rng(5).random((8, 8, 3))
    cands = np.stack([expand_endpoint(0.3, 0.1 * i, 0.2) for i in range(3)])
    joint = evaluate(sim, cands, EnergySpec(goal, evals=3), lambda i, j: [9, i, j])
    assert np.ptp(joint[0]) > 0  # evaluations are genuinely stochastic
    for j in range(3):
        single = evaluate(sim, cands, EnergySpec(goal, evals=1), lambda i, _: [9, i, j])
        np.testing.assert_array_equal(single[:, 0], joint[:, j])
    one = energy(sim, cands[1], EnergySpec(goal, evals=3), seed=4)
    parts = [evaluate(sim, cands[1:2], EnergySpec(goal, evals=1), lambda i, _: [4, j])[0, 0] for j in range(3)]
    assert one == pytest.approx(np.mean(parts), abs=1e-15)


def test_candidate_energy_independent_of_batch():
    sim = tiny_simulator(1)
    goal = np.random.default_rng(6).random((8, 8, 3))
    spec = EnergySpec(goal, evals=2)
    cands = np.stack([expand_endpoint(0.1 * i, 0.0, 0.1) for i in range(4)])
    batch = evaluate(sim, cands, spec, lambda i, j: [3, i, j])
    alone = evaluate(sim, cands[2:3], spec, lambda i, j: [3, 2, j])
    np.testing.assert_allclose(batch[2], alone[0], rtol=0, atol=1e-12)


# --- CEM ---

def test_single_candidate_population():
    cfg = CEMConfig(population=1)
    res = cem_plan(oracle(), goal_spec(START, evals=1), cfg, seed=3)
    draw = np.random.default_rng([3, 0, 0x63656D]).standard_normal((1, 3))[0]
    np.testing.assert_array_equal(res.best.endpoint, np.array(cfg.mean) + np.sqrt(cfg.var) * draw)
    assert res.best.index == 0


def test_refit_is_exact_elite_moments():
    cfg = CEMConfig(population=20, iterations=3, elite_fraction=0.2)
    goal = endpoint_pose(START, (0.5, 0.2, 0.3), 1.0)
    res = cem_plan(oracle(), goal_spec(goal, evals=1), cfg, seed=1)
    for before, after in zip(res.trace, res.trace[1:]):
        eps = np.array(before["endpoints"])
        energies = np.array(before["energies"])
        elite = np.argsort(energies, kind="stable")[:cfg.elites]
        assert before["elite_indices"] == elite.tolist()
        assert after["mean"] == eps[elite].mean(axis=0).tolist()
        assert after["var"] == (eps[elite].var(axis=0) + cfg.var_floor).tolist()
        assert before["elite_energy"] <= before["population_energy"]
    assert res.best.energy == min(t["best_energy"] for t in res.trace)


def test_all_invalid_is_flagged():
    spec = goal_spec(START, valid_action=lambda a: False, evals=1)
    res = cem_plan(oracle(), spec, CEMConfig(population=6), seed=0)
    assert res.all_invalid and res.best is not None
    assert not cem_plan(oracle(), goal_spec(START, evals=1), CEMConfig(population=6)).all_invalid


def test_constrained_plan_emits_exact_pattern():
    for constraint in CONSTRAINTS[1:]:
        res = cem_plan(oracle(), goal_spec(START, evals=1), CEMConfig(population=10, constraint=constraint))
        mask = constraint_mask(8, constraint)
        assert np.all(res.best.actions[:, :2][mask] == 0.0)


def test_cem_beats_initial_mean_in_empty_room():
    cfg = CEMConfig()
    wins = 0
    for trial in range(100):
        rng = np.random.default_rng([trial, 0x676F616C])
        start = Pose(4.0, 4.0, rng.uniform(-math.pi, math.pi))
        goal = endpoint_pose(start, np.array(cfg.mean) + np.sqrt(cfg.var) * rng.standard_normal(3), 1.0)
        sim = oracle(start)
        res = cem_plan(sim, goal_spec(goal, evals=1), cfg, seed=trial)
        best = pose_error(sim.poses(res.best.actions)[-1], goal.as_array())
        prior = pose_error(sim.poses(expand_endpoint(*cfg.mean))[-1], goal.as_array())
        wins += best < prior
    assert wins >= 80


# --- ranking ---

def test_single_candidate_ranks_itself():
    c = expand_endpoint(0.3, 0.0, 0.0)
    ranked = rank_trajectories(oracle(), [c], goal_spec(START, evals=1))
    assert len(ranked) == 1 and ranked[0].index == 0 and np.array_equal(ranked[0].actions, c)
    with pytest.raises(ValueError):
        rank_trajectories(oracle(), [], goal_spec(START))


def test_perfect_candidate_ranks_first():
    rng = np.random.default_rng(2)
    truth = expand_endpoint(0.6, -0.3, 0.4)
    goal = Pose.from_array(oracle().poses(truth)[-1])
    cands = [expand_endpoint(*(np.array([0.6, -0.3, 0.4]) + rng.normal(0, 0.2, 3))) for _ in range(15)]
    cands.insert(7, truth)
    ranked = rank_trajectories(oracle(), cands, goal_spec(goal, evals=1))
    assert ranked[0].index == 7 and ranked[0].energy == 0.0


def test_ties_keep_candidate_order_and_ranking_is_deterministic():
    a, b = expand_endpoint(0.2, 0.1, 0.0), expand_endpoint(0.9, 0.0, 0.0)
    spec = goal_spec(Pose(4.5, 4.3, 0.4), evals=1)
    ranked = rank_trajectories(oracle(), [b, a, b, a], spec)
    assert [r.index for r in ranked] == [1, 3, 0, 2]
    sim = tiny_simulator(2)
    goal = np.random.default_rng(3).random((8, 8, 3))
    cands = [expand_endpoint(0.1 * i, 0.0, 0.0) for i in range(5)]
    r1 = rank_trajectories(sim, cands, EnergySpec(goal), seed=8)
    r2 = rank_trajectories(sim, cands, EnergySpec(goal), seed=8)
    assert [r.index for r in r1] == [r.index for r in r2]
    assert [r.energy for r in r1] == [r.energy for r in r2]


@given(st.floats(0.1, 50.0), st.integers(0, 100))
@settings(max_examples=15, deadline=None)
def test_ranking_invariant_to_similarity_scale(scale, seed):
    rng = np.random.default_rng(seed)
    cands = [expand_endpoint(*rng.normal([0.4, 0, 0], 0.3)) for _ in range(6)]
    cands[2][3, 0] = -0.5  # violates the predicate below
    valid = lambda a: a[0] >= 0
    goal = render(ROOM, endpoint_pose(START, (0.4, 0.0, 0.0), 1.0))
    base = rank_trajectories(oracle(), cands, EnergySpec(goal, valid_action=valid, evals=1))
    scaled = rank_trajectories(oracle(), cands, EnergySpec(goal, valid_action=valid, evals=1,
                                                             similarity_scale=scale, penalty=100.0 * max(scale, 1)))
    assert [r.index for r in base] == [r.index for r in scaled]


def test_pose_error():
    assert pose_error([0, 0, 3.1], [0, 0, -3.1]) == pytest.approx(2 * math.pi - 6.2)
    assert pose_error([1, 2, 0], [4, 6, 0]) == pytest.approx(5.0)
