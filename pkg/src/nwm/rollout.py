"""Autoregressive rollouts of the world model and per-horizon prediction metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .cdit import WorldModel, decode
from .diffusion import NoiseSchedule, sample
from .evalkit import psnr
from .features import feature_distance


@dataclass
class Trajectory:
    actions: np.ndarray  # (B, L, 4)
    states: np.ndarray  # (B, L, n, dl) predicted latents, one per action
    seeds: list  # per step: the seed material of that step's generator(s)

    def __post_init__(self):
        if self.states.shape[:2] != self.actions.shape[:2]:
            raise ValueError("need exactly one predicted state per action")

    def frames(self, model: WorldModel) -> np.ndarray:
        return decode(self.states, model.config)


def step_generators(seed, step: int):
    """One generator for an int seed, else one per row from a sequence of row seeds."""
    if np.ndim(seed) == 0:
        return np.random.default_rng([int(seed), step])
    return [np.random.default_rng([int(s), step]) for s in seed]


def rollout(model: WorldModel, context, actions, schedule: NoiseSchedule | None = None, seed=0,
            num_steps: int = 10, prediction: str = "x", on_step=None) -> Trajectory:
    """Predict one state per action, feeding predictions back through a sliding context window.

    context is (B, k, n, dl) or (k, n, dl); actions is (B, L, 4) or (L, 4),
    shared by every row in the latter case. Step i draws its noise from
    ``default_rng([seed, i])`` (per row when ``seed`` is a sequence).
    ``on_step(i, window, state)`` sees the exact context window used.
    """
    schedule = schedule or NoiseSchedule(model.config.diffusion_steps)
    context = np.asarray(context)
    if context.ndim == 3:
        context = context[None]
    if context.shape[1] == 0:
        raise ValueError("context must contain at least one frame")
    b = context.shape[0]
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim == 2:
        actions = np.broadcast_to(actions, (b,) + actions.shape)
    if actions.shape[1] == 0:
        raise ValueError("need at least one action")
    m = model.config.context
    history = [context[:, i] for i in range(context.shape[1])]
    states, seeds = [], []
    for i in range(actions.shape[1]):
        window = np.stack(history[-m:], axis=1)
        seeds.append([seed, i] if np.ndim(seed) == 0 else [[int(s), i] for s in seed])
        state = sample(model, window, actions[:, i], schedule, num_steps, step_generators(seed, i), prediction)
        if on_step is not None:
            on_step(i, window, state)
        states.append(state)
        history.append(state)
    return Trajectory(np.array(actions), np.stack(states, axis=1), seeds)


def evaluate_prediction(predicted: np.ndarray, truth: np.ndarray, horizons, fps: float) -> list[dict]:
    """PSNR and feature distance at each horizon (seconds after the last context frame).

    ``predicted[i]`` and ``truth[i]`` are the frames (i+1)/fps seconds ahead.
    """
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {truth.shape}")
    rows = []
    for h in horizons:
        step = int(round(h * fps))
        if step < 1 or step > len(truth):
            raise ValueError(f"horizon {h}s needs {step} frames; only {len(truth)} available")
        p, t = predicted[step - 1], truth[step - 1]
        rows.append({"horizon_s": float(h), "step": step, "psnr": psnr(p, t),
                     "feature_distance": float(feature_distance(p, t))})
    return rows


def rows_to_csv(rows: list[dict], config_hash: str | None = None) -> str:
    if not rows:
        raise ValueError("no rows")
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
