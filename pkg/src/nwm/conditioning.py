"""Conditioning vector from action, time shift and diffusion step; action composition.

Actions are handled as float arrays with rows ``[ux, uy, phi, k]``.
"""
from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, flop_scope, silu
from .nn import Linear, Module
from .world import wrap_angle


def frequencies(num_frequencies: int, base: float = 1e4) -> np.ndarray:
    """Geometrically spaced angular frequencies 1, base^(-1/F), ..., base^(-(F-1)/F)."""
    return base ** (-np.arange(num_frequencies) / num_frequencies)


def sincos_features(value, num_frequencies: int = 8, base: float = 1e4) -> np.ndarray:
    """[sin(w_j v)..., cos(w_j v)...] per scalar; output (..., 2F)."""
    v = np.asarray(value, dtype=np.float64)[..., None]
    arg = v * frequencies(num_frequencies, base)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


class ScalarMlp(Module):
    """Two-layer MLP taking sine-cosine features of one scalar to the model width."""

    def __init__(self, num_frequencies: int, dim: int, rng: np.random.Generator):
        self.fc1 = Linear(2 * num_frequencies, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def __call__(self, feats: Tensor) -> Tensor:
        return self.fc2(silu(self.fc1(feats)))


class ConditionEmbedder(Module):
    """xi = G_u(psi(ux)) + G_u(psi(uy)) + G_phi(psi(phi)) + G_k(psi(k)) + G_t(psi(t)).

    ``use_action`` drops the translation and rotation terms; ``use_time``
    drops the time-shift term. Passing ``action=None`` (unlabeled video)
    keeps only the shift and diffusion-step terms.
    """

    def __init__(self, dim: int, rng: np.random.Generator, num_frequencies: int = 8,
                 base: float = 1e4, diffusion_steps: int = 100,
                 use_action: bool = True, use_time: bool = True):
        self.dim = dim
        self.num_frequencies = num_frequencies
        self.base = base
        self.diffusion_steps = diffusion_steps
        self.use_action = use_action
        self.use_time = use_time
        self.g_u = ScalarMlp(num_frequencies, dim, rng)
        self.g_phi = ScalarMlp(num_frequencies, dim, rng)
        self.g_k = ScalarMlp(num_frequencies, dim, rng)
        self.g_t = ScalarMlp(num_frequencies, dim, rng)

    def _feats(self, values, dtype) -> Tensor:
        return Tensor(sincos_features(values, self.num_frequencies, self.base).astype(dtype))

    def terms(self, t, action=None, shift=None) -> dict[str, Tensor]:
        """The individual embedding terms that sum to xi, keyed by name."""
        t = np.atleast_1d(np.asarray(t))
        if np.any(t < 0) or np.any(t >= self.diffusion_steps):
            raise ValueError(f"diffusion step outside [0, {self.diffusion_steps})")
        dtype = self.g_t.fc1.weight.dtype
        out = {}
        with flop_scope("cond"):
            if action is not None:
                action = np.asarray(action, dtype=np.float64).reshape(len(t), 4)
                shift = action[:, 3]
                if self.use_action:
                    out["u_x"] = self.g_u(self._feats(action[:, 0], dtype))
                    out["u_y"] = self.g_u(self._feats(action[:, 1], dtype))
                    out["phi"] = self.g_phi(self._feats(action[:, 2], dtype))
            if shift is not None and self.use_time:
                out["k"] = self.g_k(self._feats(np.broadcast_to(shift, t.shape), dtype))
            out["t"] = self.g_t(self._feats(t, dtype))
        return out

    def __call__(self, t, action=None, shift=None) -> Tensor:
        terms = list(self.terms(t, action, shift).values())
        xi = terms[0]
        for term in terms[1:]:
            xi = xi + term
        return xi


def compose_actions(actions) -> np.ndarray:
    """Aggregate consecutive actions: translations and shifts summed, yaw summed then wrapped."""
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, 4)
    if len(actions) == 0:
        raise ValueError("cannot compose an empty action sequence")
    total = actions.sum(axis=0)
    total[2] = wrap_angle(total[2])
    return total


def compose_actions_se2(actions) -> np.ndarray:
    """Exact composition: the endpoint of integrating the actions, in the first action's frame.

    Unlike :func:`compose_actions`, each translation is rotated by the yaw
    accumulated before it.
    """
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, 4)
    if len(actions) == 0:
        raise ValueError("cannot compose an empty action sequence")
    x = y = yaw = 0.0
    for ux, uy, phi, _ in actions:
        c, s = math.cos(yaw), math.sin(yaw)
        x += c * ux - s * uy
        y += s * ux + c * uy
        yaw += phi
    return np.array([x, y, wrap_angle(yaw), actions[:, 3].sum()])
