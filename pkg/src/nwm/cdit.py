"""Conditional diffusion transformer over patch-token frames, its DiT baseline, and FLOP accounting.

Frames are split into non-overlapping ``patch x patch`` tiles; each tile is
one token of width ``patch**2 * channels``. Tokens are linearly embedded to
the model width, the target frame is denoised in ``depth`` blocks, and a
final adaLN layer projects back to token width.

In a CDiT block the target tokens attend only to each other, then
cross-attend to the (normalized) context tokens. The DiT baseline runs
full self-attention over the concatenation of context and target.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tape, Tensor, concat, flop_scope, layer_norm, silu
from .conditioning import ConditionEmbedder
from .nn import Linear, Mlp, Module, MultiHeadAttention

VARIANTS = ("cdit", "dit")
LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 6
    dim: int = 128
    heads: int = 4
    patch_size: int = 4
    height: int = 32
    width: int = 32
    channels: int = 3
    context: int = 4
    variant: str = "cdit"
    diffusion_steps: int = 100
    num_frequencies: int = 8
    mlp_ratio: int = 4
    use_action: bool = True
    use_time: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError("frame size must be divisible by patch_size")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.context < 0 or self.depth < 1:
            raise ValueError("need context >= 0 and depth >= 1")

    @property
    def tokens(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def latent_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# --- patch latents -----------------------------------------------------------

def encode(frames: np.ndarray, config: ModelConfig) -> np.ndarray:
    """(..., H, W, C) frames -> (..., n, patch*patch*C) tokens, row-major over tiles."""
    frames = np.asarray(frames)
    h, w, c = config.frame_shape
    if frames.shape[-3:] != (h, w, c):
        raise ValueError(f"frame shape {frames.shape[-3:]} != {(h, w, c)}")
    p = config.patch_size
    lead = frames.shape[:-3]
    nl = len(lead)
    x = frames.reshape(*lead, h // p, p, w // p, p, c)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return np.ascontiguousarray(x).reshape(*lead, config.tokens, config.latent_dim)


def decode(tokens: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Exact inverse of :func:`encode`; no clamping."""
    tokens = np.asarray(tokens)
    if tokens.shape[-2:] != (config.tokens, config.latent_dim):
        raise ValueError(f"token shape {tokens.shape[-2:]} != {(config.tokens, config.latent_dim)}")
    h, w, c = config.frame_shape
    p = config.patch_size
    lead = tokens.shape[:-2]
    nl = len(lead)
    x = tokens.reshape(*lead, h // p, w // p, p, p, c)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return np.ascontiguousarray(x).reshape(*lead, h, w, c)


def sincos_2d(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Fixed 2D sine-cosine position table (grid_h*grid_w, dim); half the channels per axis."""
    if dim % 4:
        raise ValueError("dim must be divisible by 4 for 2D position features")
    ys, xs = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    return np.concatenate([sincos_1d(ys.ravel(), dim // 2), sincos_1d(xs.ravel(), dim // 2)], axis=1)


def sincos_1d(pos: np.ndarray, dim: int) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2) / (dim / 2))
    arg = np.asarray(pos, dtype=np.float64)[:, None] * omega
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (scale + 1.0) + shift


def chunks(mod: Tensor, count: int, dim: int) -> list[Tensor]:
    """Split (B, count*dim) into ``count`` (B, 1, dim) pieces."""
    mod = mod.reshape(mod.shape[0], 1, count * dim)
    return [mod[:, :, i * dim:(i + 1) * dim] for i in range(count)]


# --- blocks ----------------------------------------------------------------

class CDiTBlock(Module):
    """Target self-attention, cross-attention to context, MLP; each adaLN-modulated and gated."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.dim = dim
        self.adaln = Linear(dim, 9 * dim, rng, zero=True)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.mlp = Mlp(dim, mlp_ratio * dim, rng)

    def __call__(self, x: Tensor, context: Tensor, cond: Tensor) -> Tensor:
        """x (B, n, d) target tokens; context (B, m*n, d), already normalized; cond (B, d) post-SiLU."""
        if x.shape[-1] != self.dim or context.shape[-1] != self.dim or context.shape[0] != x.shape[0]:
            raise ValueError(f"shape mismatch: x{x.shape} context{context.shape}")
        with flop_scope("adaln"):
            (sh1, sc1, g1, sh2, sc2, g2, sh3, sc3, g3) = chunks(self.adaln(cond), 9, self.dim)
        with flop_scope("self_attn"):
            x = x + g1 * self.self_attn(modulate(layer_norm(x, eps=LN_EPS), sh1, sc1))
        if context.shape[1]:
            with flop_scope("cross_attn"):
                h = modulate(layer_norm(x, eps=LN_EPS), sh2, sc2)
                x = x + g2 * self.cross_attn(h, context)
        with flop_scope("mlp"):
            x = x + g3 * self.mlp(modulate(layer_norm(x, eps=LN_EPS), sh3, sc3))
        return x


class DiTBlock(Module):
    """Full self-attention over every token, then MLP."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.dim = dim
        self.adaln = Linear(dim, 6 * dim, rng, zero=True)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.mlp = Mlp(dim, mlp_ratio * dim, rng)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        if x.shape[-1] != self.dim or cond.shape[0] != x.shape[0]:
            raise ValueError(f"shape mismatch: x{x.shape} cond{cond.shape}")
        with flop_scope("adaln"):
            sh1, sc1, g1, sh3, sc3, g3 = chunks(self.adaln(cond), 6, self.dim)
        with flop_scope("self_attn"):
            x = x + g1 * self.self_attn(modulate(layer_norm(x, eps=LN_EPS), sh1, sc1))
        with flop_scope("mlp"):
            x = x + g3 * self.mlp(modulate(layer_norm(x, eps=LN_EPS), sh3, sc3))
        return x


class FinalLayer(Module):
    def __init__(self, dim: int, out_dim: int, rng: np.random.Generator):
        self.dim = dim
        self.adaln = Linear(dim, 2 * dim, rng, zero=True)
        self.proj = Linear(dim, out_dim, rng, zero=True)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        shift, scale = chunks(self.adaln(cond), 2, self.dim)
        return self.proj(modulate(layer_norm(x, eps=LN_EPS), shift, scale))


# --- model -----------------------------------------------------------------

def pad_context(context: np.ndarray, m: int) -> np.ndarray:
    """Left-pad (B, k, n, dl) context to exactly m frames by repeating the oldest frame."""
    k = context.shape[1]
    if k > m:
        raise ValueError(f"context of {k} frames exceeds model context {m}")
    if k == 0 and m > 0:
        raise ValueError("context must contain at least one frame")
    if k == m:
        return context
    pad = np.repeat(context[:, :1], m - k, axis=1)
    return np.concatenate([pad, context], axis=1)


class WorldModel(Module):
    """Predicts the clean target latent from a noisy target, context frames, action and step."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        d = config.dim
        self.embed = Linear(config.latent_dim, d, rng)
        self.condition = ConditionEmbedder(d, rng, config.num_frequencies,
                                           diffusion_steps=config.diffusion_steps,
                                           use_action=config.use_action, use_time=config.use_time)
        block = CDiTBlock if config.variant == "cdit" else DiTBlock
        self.blocks = [block(d, config.heads, rng, config.mlp_ratio) for _ in range(config.depth)]
        self.final = FinalLayer(d, config.latent_dim, rng)
        grid = config.height // config.patch_size, config.width // config.patch_size
        self.pos = sincos_2d(*grid, d)
        # frame slots 0..m-1 are context (oldest first); slot m is the target
        self.slots = sincos_1d(np.arange(config.context + 1), d)

    def __call__(self, noisy_target, context, t, action=None, shift=None) -> Tensor:
        """noisy_target (B, n, dl); context (B, k<=m, n, dl); t (B,); action (B, 4) or None."""
        cfg = self.config
        dtype = self.embed.weight.dtype
        target = np.asarray(noisy_target.data if isinstance(noisy_target, Tensor) else noisy_target)
        if target.ndim != 3 or target.shape[1:] != (cfg.tokens, cfg.latent_dim):
            raise ValueError(f"target shape {target.shape} incompatible with config")
        batch = target.shape[0]
        context = np.asarray(context)
        if context.ndim != 4 or context.shape[0] != batch or context.shape[2:] != target.shape[1:]:
            raise ValueError(f"context shape {context.shape} incompatible with target {target.shape}")
        context = pad_context(context, cfg.context)
        m, n, d = cfg.context, cfg.tokens, cfg.dim
        pos = (self.pos + self.slots[m]).astype(dtype)
        ctx_pos = (self.pos[None] + self.slots[:m, None]).reshape(m * n, d).astype(dtype)

        x_in = noisy_target if isinstance(noisy_target, Tensor) else Tensor(target.astype(dtype))
        with flop_scope("embed"):
            x = self.embed(x_in) + pos
            ctx = self.embed(Tensor(context.reshape(batch, m * n, cfg.latent_dim).astype(dtype))) + ctx_pos
        cond = silu(self.condition(t, action, shift))
        if cfg.variant == "cdit":
            ctx = layer_norm(ctx, eps=LN_EPS)
            for i, blk in enumerate(self.blocks):
                with flop_scope(f"block{i}"):
                    x = blk(x, ctx, cond)
        else:
            x = concat([ctx, x], axis=1)
            for i, blk in enumerate(self.blocks):
                with flop_scope(f"block{i}"):
                    x = blk(x, cond)
            x = x[:, m * n:]
        with flop_scope("final"):
            return self.final(x, cond)


# --- FLOP accounting -------------------------------------------------------

def count_flops(config: ModelConfig, batch: int = 1) -> dict[str, int]:
    """Closed-form multiply-add counts keyed like the instrumented tape scopes, plus totals.

    Only matrix products are counted. ``attention`` sums the score and
    value products (``*/core``); projections are listed separately.
    """
    n, m, d, dl = config.tokens, config.context, config.dim, config.latent_dim
    f, hidden = config.num_frequencies, config.mlp_ratio * config.dim
    mlp_calls = 1 + (3 if config.use_action else 0) + (1 if config.use_time else 0)
    out = {
        "embed": (n + m * n) * dl * d,
        "cond": mlp_calls * (2 * f * d + d * d),
    }
    for i in range(config.depth):
        b = f"block{i}"
        if config.variant == "cdit":
            out[f"{b}/adaln"] = 9 * d * d
            out[f"{b}/self_attn/proj"] = 4 * n * d * d
            out[f"{b}/self_attn/core"] = 2 * n * n * d
            if m:
                out[f"{b}/cross_attn/proj"] = 2 * n * d * d + 2 * m * n * d * d
                out[f"{b}/cross_attn/core"] = 2 * n * (m * n) * d
            out[f"{b}/mlp"] = 2 * n * d * hidden
        else:
            length = (m + 1) * n
            out[f"{b}/adaln"] = 6 * d * d
            out[f"{b}/self_attn/proj"] = 4 * length * d * d
            out[f"{b}/self_attn/core"] = 2 * length * length * d
            out[f"{b}/mlp"] = 2 * length * d * hidden
    out["final"] = 2 * d * d + n * d * dl
    out = {k: v * batch for k, v in out.items()}
    out["attention"] = sum(v for k, v in out.items() if k.endswith("/core"))
    out["total"] = sum(v for k, v in out.items() if k != "attention")
    return out


def instrumented_flops(model: WorldModel, batch: int = 1, seed: int = 0) -> dict[str, int]:
    """Run one forward pass on random inputs and read the tape's per-scope counts."""
    cfg = model.config
    rng = np.random.default_rng(seed)
    target = rng.normal(size=(batch, cfg.tokens, cfg.latent_dim))
    context = rng.normal(size=(batch, cfg.context, cfg.tokens, cfg.latent_dim))
    action = rng.normal(size=(batch, 4))
    t = rng.integers(0, cfg.diffusion_steps, size=batch)
    with Tape(record=False) as tape:
        model(target, context, t, action)
    out = dict(tape.flops_by_scope)
    out["attention"] = sum(v for k, v in out.items() if k.endswith("/core"))
    out["total"] = tape.flops
    return out

