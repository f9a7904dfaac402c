"""Seeded experiment protocols shared by the command line and the acceptance suite.

* planning in an empty room with the ground-truth simulator,
* ranking pools of noisy-expert trajectories,
* rollout quality as a function of prediction horizon.
"""
from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
from scipy import stats

from .cdit import WorldModel, decode
from .diffusion import LatentEpisode, NoiseSchedule
from .evalkit import ate, psnr
from .planner import (CEMConfig, EnergySpec, OracleSimulator, cem_plan, endpoint_pose, expand_endpoint,
                      pose_error, rank_trajectories)
from .rollout import rollout
from .world import Pose, WorldMap, empty_room, expert_policy, generate_map, pick_goal, render, step_pose

ROOM_SIZE = 8
GOAL_TAG = 0x676F616C
RANK_TAG = 0x72616E6B


# --- planning ----------------------------------------------------------------

def planning_trial(trial: int, cem: CEMConfig, evals: int = 3, step_size: float = 1.0,
                   seed: int = 0) -> dict:
    """One empty-room CEM run toward a goal endpoint drawn from the unconstrained initial Gaussian."""
    room = empty_room(ROOM_SIZE)
    rng = np.random.default_rng([seed, trial, GOAL_TAG])
    start = Pose(ROOM_SIZE / 2, ROOM_SIZE / 2, rng.uniform(-math.pi, math.pi))
    target = np.array(cem.mean) + np.sqrt(cem.var) * rng.standard_normal(3)
    goal = endpoint_pose(start, target, step_size)
    sim = OracleSimulator(room, start, step_size)
    result = cem_plan(sim, EnergySpec(render(room, goal), evals=evals), cem, seed=seed * 1_000_003 + trial)
    poses = sim.poses(result.best.actions)
    final = poses[-1]
    prior = sim.poses(expand_endpoint(*cem.mean, cem.steps, cem.constraint, cem.dt))[-1]
    first = result.trace[0]
    return {
        "trial": trial,
        "start": start.as_array(),
        "goal": goal.as_array(),
        "goal_endpoint": target,
        "poses": poses,
        "endpoint": result.best.endpoint,
        "trace": result.trace,
        "all_invalid": result.all_invalid,
        "constraint": cem.constraint,
        "position_error": math.hypot(final[0] - goal.x, final[1] - goal.y),
        "pose_error": pose_error(final, goal.as_array()),
        "prior_pose_error": pose_error(prior, goal.as_array()),
        "energy": result.best.energy,
        "elite_energy": first["elite_energy"],
        "population_energy": first["population_energy"],
        "actions": result.best.actions,
    }


def planning_study(trials: int, cem: CEMConfig | None = None, evals: int = 3, seed: int = 0) -> list[dict]:
    cem = cem or CEMConfig()
    return [planning_trial(t, cem, evals, seed=seed) for t in range(trials)]


def constraint_study(trials: int, constraints, evals: int = 3, seed: int = 0) -> dict[str, list[dict]]:
    """The same seeded trials planned under each constraint."""
    return {c: planning_study(trials, replace(CEMConfig(), constraint=c), evals, seed) for c in constraints}


# --- ranking -----------------------------------------------------------------

def expert_run(world: WorldMap, start: Pose, goal: Pose, steps: int, noise: float,
               rng: np.random.Generator | None) -> tuple[np.ndarray, np.ndarray]:
    """Closed-loop expert for ``steps`` actions: poses (steps+1, 3) and actions (steps, 4)."""
    pose, poses, actions = start, [start.as_array()], []
    for _ in range(steps):
        action = expert_policy(world, pose, goal, noise, rng)
        pose = step_pose(world, pose, action, world.average_step_size)
        poses.append(pose.as_array())
        actions.append(action.as_array())
    return np.array(poses), np.array(actions)


def ranking_trial(trial: int, pools=(16, 32), noise: float = 0.3, steps: int = 8, evals: int = 3,
                  seed: int = 0, make_simulator=None, resolution=(32, 32)) -> dict:
    """Rank one pool of noisy-expert candidates against the noise-free expert's final view.

    Smaller pools are prefixes of the largest one. ``random`` is candidate 0.
    ``make_simulator(world, start)`` replaces the ground-truth simulator.
    """
    world = generate_map(seed * 1_000_003 + trial)
    rng = np.random.default_rng([seed, trial, RANK_TAG])
    start = world.random_pose(rng)
    while not world.clear(start.x, start.y):
        start = world.random_pose(rng)
    goal = pick_goal(world, start, rng)
    reference, _ = expert_run(world, start, goal, steps, 0.0, None)
    runs = [expert_run(world, start, goal, steps, noise, np.random.default_rng([seed, trial, RANK_TAG, c]))
            for c in range(max(pools))]
    if make_simulator is None:
        sim = OracleSimulator(world, start, world.average_step_size, tuple(resolution))
    else:
        sim = make_simulator(world, start)
    spec = EnergySpec(render(world, Pose.from_array(reference[-1]), tuple(resolution)), evals=evals)
    ranked = rank_trajectories(sim, [r[1] for r in runs], spec, seed=seed * 1_000_003 + trial)
    picks = {"random": 0}
    for size in pools:
        picks[f"best-of-{size}"] = next(r.index for r in ranked if r.index < size)
    row = {"trial": trial}
    for name, index in picks.items():
        poses = runs[index][0]
        row[f"{name}/final_error"] = float(np.hypot(*(poses[-1, :2] - reference[-1, :2])))
        row[f"{name}/ate"] = ate(poses, reference)
    return row


def ranking_study(trials: int, pools=(16, 32), noise: float = 0.3, evals: int = 3, seed: int = 0,
                  make_simulator=None, resolution=(32, 32)) -> list[dict]:
    return [ranking_trial(t, pools, noise, evals=evals, seed=seed, make_simulator=make_simulator,
                          resolution=resolution) for t in range(trials)]


def paired_gap(worse, better) -> dict:
    """One-sided Wilcoxon signed-rank test that ``worse - better`` is positive (zero gaps dropped)."""
    worse, better = np.asarray(worse, dtype=np.float64), np.asarray(better, dtype=np.float64)
    gap = worse - better
    p = float(stats.wilcoxon(gap, alternative="greater").pvalue) if np.any(gap != 0) else 1.0
    return {"mean_gap": float(gap.mean()), "p_value": p, "wins": int(np.sum(gap > 0)),
            "losses": int(np.sum(gap < 0))}


# --- rollout horizons ----------------------------------------------------------

def horizon_study(model: WorldModel, episodes: list[LatentEpisode], horizons=(1.0, 2.0, 4.0), fps: float = 4.0,
                  schedule: NoiseSchedule | None = None, num_steps: int = 10, seed: int = 0,
                  chunk: int = 32) -> list[dict]:
    """Per-episode PSNR at each horizon for rollouts from the first m real frames.

    Episodes too short for the longest horizon are skipped.
    """
    m = model.config.context
    steps = int(round(max(horizons) * fps))
    usable = [i for i, ep in enumerate(episodes) if len(ep) >= m + steps]
    rows = []
    for s in range(0, len(usable), chunk):
        ids = usable[s:s + chunk]
        ctx = np.stack([episodes[i].latents[:m] for i in ids])
        acts = np.stack([episodes[i].actions[m - 1:m - 1 + steps] for i in ids])
        traj = rollout(model, ctx, acts, schedule, seed=[seed * 100_003 + i for i in ids], num_steps=num_steps)
        pred = decode(traj.states, model.config)
        truth = decode(np.stack([episodes[i].latents[m:m + steps] for i in ids]), model.config)
        for row, i in enumerate(ids):
            out = {"episode": i}
            for h in horizons:
                k = int(round(h * fps))
                out[f"psnr@{h:g}s"] = psnr(pred[row, k - 1], truth[row, k - 1])
            rows.append(out)
    return rows
