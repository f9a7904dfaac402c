"""Frozen random convolutional features and the perceptual similarity score built on them."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FEATURE_SEED = 0x5EED
CHANNELS = (16, 32, 64)
FEATURE_WEIGHT = 0.8


@lru_cache(maxsize=None)
def conv_weights(in_channels: int = 3, seed: int = FEATURE_SEED) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """3x3 kernels per stage, He-scaled, with small biases; never trained."""
    rng = np.random.default_rng(seed)
    stages, c_in = [], in_channels
    for c_out in CHANNELS:
        w = rng.normal(0, np.sqrt(2.0 / (9 * c_in)), size=(3, 3, c_in, c_out))
        b = rng.normal(0, 0.1, size=c_out)
        stages.append((w, b))
        c_in = c_out
    return tuple(stages)


def conv3x3_stride2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B, H/2, W/2, C'), reflect padding."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="reflect")
    patches = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::2, ::2]  # B, H/2, W/2, C, 3, 3
    return np.einsum("bhwcij,ijco->bhwo", patches, w, optimize=True) + b


def features(frames: np.ndarray, seed: int = FEATURE_SEED) -> list[np.ndarray]:
    """Per-stage activations, each unit-normalized across channels at every location."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    out = []
    for w, b in conv_weights(x.shape[-1], seed):
        x = np.maximum(conv3x3_stride2(x, w, b), 0.0)
        norm = np.sqrt((x * x).sum(axis=-1, keepdims=True)) + 1e-10
        out.append(x / norm)
    return out


def feature_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Mean over stages of the spatially averaged squared distance of normalized features."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    single = a.ndim == 3
    fa, fb = features(a), features(b)
    d = sum(((x - y) ** 2).sum(axis=-1).mean(axis=(1, 2)) for x, y in zip(fa, fb)) / len(fa)
    return d[0] if single else d


def perceptual_score(a: np.ndarray, b: np.ndarray, feature_weight: float = FEATURE_WEIGHT) -> np.ndarray:
    """Similarity in (-inf, 0]; 0 only for identical frames. Accepts (H, W, C) or (B, H, W, C)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    pixel = ((a - b) ** 2).mean(axis=(-3, -2, -1))
    return -(feature_weight * feature_distance(a, b) + (1.0 - feature_weight) * pixel)


def score_bound(feature_weight: float = FEATURE_WEIGHT, pixel_range: float = 1.0) -> float:
    """Largest possible |score| for frames in [0, pixel_range].

    Features are non-negative after the ReLU, so two normalized feature
    vectors are at most sqrt(2) apart.
    """
    return feature_weight * 2.0 + (1.0 - feature_weight) * pixel_range ** 2
