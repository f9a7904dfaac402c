"""Goal-conditioned planning: energy, constrained endpoint expansion, CEM and trajectory ranking.

Planning works on endpoint tuples (dx, dy, yaw) in action units. A tuple
is expanded into ``steps`` per-step actions whose summed translation is
(dx, dy) and whose yaw change happens at the last step.

Simulators turn a batch of action sequences into the frames they lead to:
``OracleSimulator`` integrates poses and renders the true world,
``LearnedSimulator`` rolls out the world model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .cdit import WorldModel, decode
from .diffusion import NoiseSchedule
from .features import perceptual_score, score_bound
from .rollout import rollout
from .world import NavAction, Pose, WorldMap, render, step_pose, wrap_angle

CONSTRAINTS = ("none", "forward-first", "left-right-first", "straight-then-forward")


# --- configs and results -----------------------------------------------------

@dataclass
class EnergySpec:
    goal: np.ndarray  # goal frame (H, W, C)
    feature_weight: float = 0.8
    valid_action: Callable[[np.ndarray], bool] | None = None  # one (4,) action -> allowed?
    safe_state: Callable[[np.ndarray], bool] | None = None  # one frame -> safe?
    penalty: float = 100.0
    evals: int = 3
    similarity_scale: float = 1.0

    def __post_init__(self):
        if self.evals < 1:
            raise ValueError("need at least one evaluation per candidate")
        if self.similarity_scale <= 0:
            raise ValueError("similarity scale must be positive")
        bound = self.similarity_scale * score_bound(self.feature_weight)
        if self.penalty <= bound:
            raise ValueError(f"penalty must exceed the similarity bound {bound:.3g}")


@dataclass
class CEMConfig:
    population: int = 120
    elite_fraction: float = 0.1
    iterations: int = 1
    mean: tuple[float, float, float] = (0.3, 0.0, 0.0)
    var: tuple[float, float, float] = (0.05, 0.05, 0.1)
    steps: int = 8
    dt: float = 0.25
    var_floor: float = 1e-6
    constraint: str = "none"

    def __post_init__(self):
        if self.population < 1 or self.iterations < 1 or self.steps < 1:
            raise ValueError("population, iterations and steps must be positive")
        if not 0 < self.elite_fraction <= 1:
            raise ValueError("elite fraction must be in (0, 1]")
        if min(self.var) <= 0:
            raise ValueError("initial variances must be positive")
        if self.constraint not in CONSTRAINTS:
            raise ValueError(f"unknown constraint {self.constraint!r}")

    @property
    def elites(self) -> int:
        return max(1, int(round(self.elite_fraction * self.population)))


@dataclass
class ScoredTrajectory:
    index: int
    endpoint: np.ndarray | None  # (dx, dy, yaw) when the candidate came from an endpoint
    actions: np.ndarray  # (L, 4)
    energies: np.ndarray  # (M,)

    @property
    def energy(self) -> float:
        return float(np.mean(self.energies))


@dataclass
class PlanResult:
    best: ScoredTrajectory
    trace: list[dict] = field(default_factory=list)
    all_invalid: bool = False


# --- endpoint expansion --------------------------------------------------------

def split_steps(steps: int, first: int) -> tuple[int, int]:
    """Steps in the first and second phase of a two-phase constraint (5/3 of 8 by default)."""
    a = min(max(1, int(round(steps * first / 8))), steps - 1) if steps > 1 else 1
    return a, steps - a


def expand_endpoint(dx: float, dy: float, yaw: float, steps: int = 8, constraint: str = "none",
                    dt: float = 0.25) -> np.ndarray:
    """Per-step actions (steps, 4) realizing the endpoint; constrained entries are exactly 0.0.

    none: equal (dx, dy) steps. forward-first: forward only, then lateral
    only. left-right-first: lateral only (3 of 8), then forward only.
    straight-then-forward: the lateral part in the first 3 of 8 steps,
    forward spread over all steps.
    """
    if steps < 1:
        raise ValueError("need at least one step")
    if constraint not in CONSTRAINTS:
        raise ValueError(f"unknown constraint {constraint!r}; expected one of {CONSTRAINTS}")
    out = np.zeros((steps, 4))
    out[:, 3] = dt
    if constraint == "none" or steps == 1:
        out[:, 0], out[:, 1] = dx / steps, dy / steps
    elif constraint == "forward-first":
        a, b = split_steps(steps, 5)
        out[:a, 0] = dx / a
        out[a:, 1] = dy / b
    elif constraint == "left-right-first":
        a, b = split_steps(steps, 3)
        out[:a, 1] = dy / a
        out[a:, 0] = dx / b
    else:
        a, _ = split_steps(steps, 3)
        out[:, 0] = dx / steps
        out[:a, 1] = dy / a
    out[-1, 2] = yaw
    return out


def constraint_mask(steps: int, constraint: str) -> np.ndarray:
    """Boolean (steps, 2): True where the translation component is hard-wired to zero."""
    probe = expand_endpoint(1.0, 1.0, 0.0, steps, constraint)
    return probe[:, :2] == 0.0


# --- simulators ----------------------------------------------------------------

class Simulator(Protocol):
    def frames(self, actions: np.ndarray, seeds: Sequence) -> np.ndarray:
        """(B, L, 4) actions and one seed per row -> (B, L, H, W, C) frames after each action."""


@dataclass
class OracleSimulator:
    """Ground-truth world: integrates poses with wall-stop and renders them."""

    world: WorldMap
    start: Pose
    step_size: float = 1.0
    resolution: tuple[int, int] = (32, 32)

    def poses(self, actions: np.ndarray) -> np.ndarray:
        pose, out = self.start, [self.start.as_array()]
        for a in np.asarray(actions, dtype=np.float64):
            pose = step_pose(self.world, pose, NavAction((a[0], a[1]), a[2], a[3]), self.step_size)
            out.append(pose.as_array())
        return np.array(out)

    def frames(self, actions: np.ndarray, seeds: Sequence = ()) -> np.ndarray:
        return np.stack([np.stack([render(self.world, Pose.from_array(p), self.resolution)
                                   for p in self.poses(seq)[1:]]) for seq in actions])

    def final_frames(self, actions: np.ndarray) -> np.ndarray:
        return np.stack([render(self.world, Pose.from_array(self.poses(seq)[-1]), self.resolution)
                         for seq in actions])


@dataclass
class LearnedSimulator:
    """World-model rollouts from a fixed latent context; each row uses its own seed."""

    model: WorldModel
    context: np.ndarray  # (k, n, dl)
    schedule: NoiseSchedule | None = None
    num_steps: int = 10
    prediction: str = "x"

    def frames(self, actions: np.ndarray, seeds: Sequence) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.float64)
        ctx = np.repeat(np.asarray(self.context)[None], len(actions), axis=0)
        traj = rollout(self.model, ctx, actions, self.schedule, seed=list(seeds), num_steps=self.num_steps,
                       prediction=self.prediction)
        return decode(traj.states, self.model.config)


# --- energy --------------------------------------------------------------------

def penalty_count(actions: np.ndarray, frames: np.ndarray, spec: EnergySpec) -> int:
    bad = 0
    if spec.valid_action is not None:
        bad += sum(not spec.valid_action(a) for a in actions)
    if spec.safe_state is not None:
        bad += sum(not spec.safe_state(f) for f in frames)
    return bad


def evaluate(simulator, candidates: np.ndarray, spec: EnergySpec, seed_of: Callable[[int, int], list]) -> np.ndarray:
    """Energies (B, M): -similarity of the last frame to the goal plus indicator penalties.

    ``seed_of(i, j)`` gives the seed material for candidate i, evaluation j.
    """
    candidates = np.asarray(candidates, dtype=np.float64)
    b = len(candidates)
    out = np.empty((b, spec.evals))
    for j in range(spec.evals):
        seeds = [np.random.SeedSequence(seed_of(i, j)).generate_state(1)[0] for i in range(b)]
        if isinstance(simulator, OracleSimulator) and spec.safe_state is None:
            finals = simulator.final_frames(candidates)
            frames = None
        else:
            frames = simulator.frames(candidates, seeds)
            finals = frames[:, -1]
        sim = perceptual_score(finals, np.broadcast_to(spec.goal, finals.shape), spec.feature_weight)
        for i in range(b):
            seq_frames = frames[i] if frames is not None else ()
            out[i, j] = -spec.similarity_scale * sim[i] + spec.penalty * penalty_count(candidates[i], seq_frames, spec)
    return out


def energy(simulator, actions: np.ndarray, spec: EnergySpec, seed: int = 0) -> float:
    """Mean energy of one action sequence over ``spec.evals`` stochastic evaluations."""
    return float(evaluate(simulator, np.asarray(actions)[None], spec, lambda i, j: [seed, j]).mean())


# --- CEM -------------------------------------------------------------------

def cem_plan(simulator, spec: EnergySpec, cem: CEMConfig | None = None, seed: int = 0) -> PlanResult:
    """Cross-entropy search over endpoint tuples; returns the lowest-energy candidate seen."""
    cem = cem or CEMConfig()
    mean = np.array(cem.mean, dtype=np.float64)
    var = np.array(cem.var, dtype=np.float64)
    best: ScoredTrajectory | None = None
    trace = []
    for it in range(cem.iterations):
        rng = np.random.default_rng([seed, it, 0x63656D])
        endpoints = mean + np.sqrt(var) * rng.standard_normal((cem.population, 3))
        cands = np.stack([expand_endpoint(*e, cem.steps, cem.constraint, cem.dt) for e in endpoints])
        energies = evaluate(simulator, cands, spec, lambda i, j: [seed, it, i, j])
        mean_e = energies.mean(axis=1)
        order = np.argsort(mean_e, kind="stable")
        elite = order[:cem.elites]
        new_mean = endpoints[elite].mean(axis=0)
        new_var = endpoints[elite].var(axis=0) + cem.var_floor
        i0 = int(order[0])
        if best is None or mean_e[i0] < best.energy:
            best = ScoredTrajectory(it * cem.population + i0, endpoints[i0], cands[i0], energies[i0])
        trace.append({"iteration": it, "mean": mean.tolist(), "var": var.tolist(),
                      "population_energy": float(mean_e.mean()), "elite_energy": float(mean_e[elite].mean()),
                      "best_energy": float(mean_e[i0]), "energies": mean_e.tolist(),
                      "elite_indices": elite.tolist(), "endpoints": endpoints.tolist()})
        mean, var = new_mean, new_var
    all_invalid = bool(min(t["best_energy"] for t in trace) >= spec.penalty)
    return PlanResult(best, trace, all_invalid)


def rank_trajectories(simulator, candidates: Sequence[np.ndarray], spec: EnergySpec,
                      seed: int = 0) -> list[ScoredTrajectory]:
    """Candidates sorted by mean energy; ties keep candidate order."""
    if len(candidates) == 0:
        raise ValueError("no candidates to rank")
    cands = np.stack([np.asarray(c, dtype=np.float64) for c in candidates])
    energies = evaluate(simulator, cands, spec, lambda i, j: [seed, i, j])
    scored = [ScoredTrajectory(i, None, cands[i], energies[i]) for i in range(len(cands))]
    return sorted(scored, key=lambda s: (s.energy, s.index))


def pose_error(a, b) -> float:
    """SE(2) distance: sqrt(position error^2 + wrapped yaw error^2), yaw in radians."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(math.hypot(a[0] - b[0], a[1] - b[1], wrap_angle(a[2] - b[2])))


def endpoint_pose(start: Pose, endpoint, step_size: float) -> Pose:
    """Pose reached by an unobstructed straight-line endpoint (yaw applied last)."""
    dx, dy, yaw = endpoint
    c, s = math.cos(start.yaw), math.sin(start.yaw)
    return Pose(start.x + (c * dx - s * dy) * step_size, start.y + (s * dx + c * dy) * step_size,
                start.yaw + yaw)
