"""Noise schedule, forward noising, multi-goal training batches, training loop and ancestral sampling."""
from __future__ import annotations

import csv
import io as _io
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, Tape, Tensor, mse
from .cdit import ModelConfig, WorldModel, encode
from .conditioning import compose_actions
from .io import load_checkpoint, save_checkpoint, write_text
from .nn import AdamW

PREDICTIONS = ("x", "eps")


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear betas, rescaled so the endpoints match the 1000-step defaults at any length."""

    steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one diffusion step")

    @property
    def betas(self) -> np.ndarray:
        scale = 1000.0 / self.steps
        return np.linspace(self.beta_start * scale, self.beta_end * scale, self.steps)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer) or np.any(t < 0) or np.any(t >= self.steps):
            raise ValueError(f"diffusion step must be an integer in [0, {self.steps})")
        return t


def add_noise(clean, t, noise, schedule: NoiseSchedule, alpha_bars: np.ndarray | None = None) -> np.ndarray:
    """sqrt(abar_t) * clean + sqrt(1 - abar_t) * noise with t per leading row.

    ``alpha_bars`` overrides the schedule's table (used to probe the limits).
    """
    clean = np.asarray(clean)
    noise = np.asarray(noise)
    t = schedule.check_t(t)
    ab = schedule.alpha_bars if alpha_bars is None else np.asarray(alpha_bars, dtype=np.float64)
    ab = ab[t].reshape(np.shape(t) + (1,) * (clean.ndim - np.ndim(t)))
    return (np.sqrt(ab) * clean + np.sqrt(1.0 - ab) * noise).astype(clean.dtype)


# --- batches ---------------------------------------------------------------

@dataclass
class LatentEpisode:
    """Token latents (L, n, dl) and per-step actions (L-1, 4) of one episode."""

    latents: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        if len(self.actions) != len(self.latents) - 1:
            raise ValueError("need exactly one action between consecutive frames")

    def __len__(self) -> int:
        return len(self.latents)


@dataclass
class TrainBatch:
    context: np.ndarray  # (B, m, n, dl)
    target: np.ndarray  # (B, n, dl)
    action: np.ndarray  # (B, 4)
    goals: int = 1

    def __post_init__(self):
        b = len(self.target)
        if len(self.context) != b or len(self.action) != b or b % self.goals:
            raise ValueError("inconsistent batch rows")


def context_window(latents: np.ndarray, tau: int, m: int) -> np.ndarray:
    """Frames tau-m+1 .. tau, repeating frame 0 where the episode prefix is too short."""
    idx = np.clip(np.arange(tau - m + 1, tau + 1), 0, None)
    return latents[idx]


def sample_goals(episode: LatentEpisode, tau: int, goals: int, max_shift: int, context: int,
                 rng: np.random.Generator, past: bool = False) -> TrainBatch:
    """``goals`` rows sharing the context ending at ``tau``, each with a distinct shift.

    Shifts are frame counts drawn uniformly without replacement from
    1..max_shift (truncated at the episode end); the paired action is the
    composition of the per-frame actions tau .. tau+shift-1. With ``past``
    the pool also holds -max_shift..-1 (truncated at the episode start),
    paired with the negated composition of the actions leading up to tau.
    """
    if tau < 0:
        raise ValueError(f"frame {tau} is not in the episode")
    pool = np.arange(1, min(max_shift, len(episode) - 1 - tau) + 1)
    if past:
        pool = np.concatenate([np.arange(-min(max_shift, tau), 0), pool])
    if len(pool) < goals:
        raise ValueError(f"episode of length {len(episode)} cannot supply {goals} goals after frame {tau}")
    shifts = rng.choice(pool, size=goals, replace=False)
    ctx = context_window(episode.latents, tau, context)
    actions = np.stack([compose_actions(episode.actions[tau:tau + k]) if k > 0
                        else -compose_actions(episode.actions[tau + k:tau]) for k in shifts])
    return TrainBatch(np.repeat(ctx[None], goals, axis=0), episode.latents[tau + shifts], actions, goals)


def make_batch(episodes: list[LatentEpisode], batch_size: int, goals: int, max_shift: int,
               context: int, rng: np.random.Generator, past: bool = False) -> TrainBatch:
    if batch_size % goals:
        raise ValueError("batch size must be divisible by the number of goals")
    eligible = [i for i, ep in enumerate(episodes) if len(ep) > goals]
    if not eligible:
        raise ValueError("no episode is long enough for the requested goals")
    parts = []
    for _ in range(batch_size // goals):
        ep = episodes[eligible[rng.integers(len(eligible))]]
        tau = int(rng.integers(0, len(ep) - goals))
        parts.append(sample_goals(ep, tau, goals, max_shift, context, rng, past))
    return TrainBatch(np.concatenate([p.context for p in parts]), np.concatenate([p.target for p in parts]),
                      np.concatenate([p.action for p in parts]), goals)


# --- objective -------------------------------------------------------------

def training_loss(model: WorldModel, batch: TrainBatch, schedule: NoiseSchedule,
                  rng: np.random.Generator, prediction: str = "x") -> Tensor:
    """Mean squared error of the clean target (or the noise) at uniformly drawn steps."""
    if prediction not in PREDICTIONS:
        raise ValueError(f"prediction must be one of {PREDICTIONS}")
    b = len(batch.target)
    t = rng.integers(0, schedule.steps, size=b)
    noise = rng.standard_normal(batch.target.shape).astype(batch.target.dtype)
    noisy = add_noise(batch.target, t, noise, schedule)
    pred = model(noisy, batch.context, t, batch.action)
    loss = mse(pred, batch.target if prediction == "x" else noise)
    if not np.isfinite(loss.data):
        raise NonFiniteError("training loss is not finite")
    return loss


# --- sampling --------------------------------------------------------------

def respaced_steps(schedule: NoiseSchedule, num_steps: int) -> np.ndarray:
    """Increasing subset of diffusion steps ending at T-1, used by the sampler."""
    if not 1 <= num_steps <= schedule.steps:
        raise ValueError(f"num_steps must be in [1, {schedule.steps}]")
    if num_steps == 1:
        return np.array([schedule.steps - 1])
    return np.unique(np.round(np.linspace(0, schedule.steps - 1, num_steps)).astype(np.int64))


def standard_normal(rng, shape) -> np.ndarray:
    """Draw from one generator, or row by row from a sequence of per-row generators."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    if len(rng) != shape[0]:
        raise ValueError("need one generator per batch row")
    return np.stack([r.standard_normal(shape[1:]) for r in rng])


def sample(model: WorldModel, context, action, schedule: NoiseSchedule, num_steps: int,
           rng, prediction: str = "x", shift=None, on_step=None) -> np.ndarray:
    """Ancestral sampling from pure noise on a respaced step grid.

    Each step converts the model output to a clean-state estimate and
    draws from the Gaussian posterior between consecutive grid steps. The
    last step returns the posterior mean, which equals the clean estimate.
    ``rng`` is a generator or a sequence with one generator per batch row.
    """
    steps = respaced_steps(schedule, num_steps)
    cfg = model.config
    context = np.asarray(context)
    b = context.shape[0]
    dtype = model.embed.weight.dtype
    ab_all = schedule.alpha_bars
    x = standard_normal(rng, (b, cfg.tokens, cfg.latent_dim)).astype(dtype)
    with Tape(record=False):
        for i in range(len(steps) - 1, -1, -1):
            t = steps[i]
            ab_t = ab_all[t]
            ab_prev = ab_all[steps[i - 1]] if i > 0 else 1.0
            out = model(x, context, np.full(b, t), action, shift).data
            x0 = out if prediction == "x" else (x - np.sqrt(1 - ab_t) * out) / np.sqrt(ab_t)
            if on_step is not None:
                on_step(int(t), x0)
            if i == 0:
                return x0.astype(dtype)
            beta = 1.0 - ab_t / ab_prev
            coef_clean = beta * np.sqrt(ab_prev) / (1.0 - ab_t)
            coef_noisy = (1.0 - ab_prev) * np.sqrt(1.0 - beta) / (1.0 - ab_t)
            var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
            x = (coef_clean * x0 + coef_noisy * x
                 + np.sqrt(var) * standard_normal(rng, x.shape)).astype(dtype)
    raise AssertionError("unreachable")


# --- training --------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    goals: int = 4
    max_shift: int = 4
    past_shifts: bool = False  # also train on targets before the context end
    lr: float = 3e-4
    weight_decay: float = 0.0
    prediction: str = "x"
    eval_every: int = 250
    val_pairs: int = 256
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    rows: list[dict] = field(default_factory=list)

    @property
    def final_val(self) -> tuple[float, float]:
        last = [r for r in self.rows if r["val_mse"] != ""][-1]
        return last["val_mse"], last["baseline_mse"]

    def to_csv(self, config_hash: str | None = None) -> str:
        """CSV text; with a hash, a leading ``# config_hash=...`` comment line."""
        buf = _io.StringIO()
        if config_hash:
            buf.write(f"# config_hash={config_hash}\n")
        w = csv.DictWriter(buf, fieldnames=["step", "loss", "val_mse", "baseline_mse"], lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()


def latent_episodes(dataset, config: ModelConfig) -> list[LatentEpisode]:
    """Encode every episode of a :class:`nwm.dataset.Dataset`."""
    return [LatentEpisode(encode(dataset.episode(i).frames, config), dataset.actions(i))
            for i in range(len(dataset))]


def validation_pairs(episodes: list[LatentEpisode], context: int, count: int,
                     rng: np.random.Generator) -> TrainBatch:
    """Held-out next-frame pairs (shift of one frame), drawn once."""
    slots = [(i, tau) for i, ep in enumerate(episodes) for tau in range(len(ep) - 1)]
    pick = rng.choice(len(slots), size=min(count, len(slots)), replace=False)
    pick.sort()
    rows = [slots[j] for j in pick]
    return TrainBatch(np.stack([context_window(episodes[i].latents, tau, context) for i, tau in rows]),
                      np.stack([episodes[i].latents[tau + 1] for i, tau in rows]),
                      np.stack([episodes[i].actions[tau] for i, tau in rows]))


def one_step_mse(model: WorldModel, pairs: TrainBatch, schedule: NoiseSchedule, seed: int,
                 prediction: str = "x", chunk: int = 64) -> tuple[float, float]:
    """(model MSE, copy-last-frame MSE): the model predicts the clean target from pure noise at T-1."""
    rng = np.random.default_rng([seed, 0x76616C])
    err = 0.0
    for s in range(0, len(pairs.target), chunk):
        sl = slice(s, s + chunk)
        pred = sample(model, pairs.context[sl], pairs.action[sl], schedule, 1, rng, prediction)
        err += float(((pred.astype(np.float64) - pairs.target[sl]) ** 2).sum())
    n = pairs.target.size
    base = float(((pairs.context[:, -1].astype(np.float64) - pairs.target) ** 2).sum())
    return err / n, base / n


def train(model: WorldModel, episodes: list[LatentEpisode], config: TrainConfig,
          schedule: NoiseSchedule | None = None, val_episodes: list[LatentEpisode] | None = None,
          out_dir: str | Path | None = None, extra_config: dict | None = None,
          log=None) -> TrainResult:
    """AdamW on the multi-goal diffusion loss; writes ``loss.csv`` and ``model.ckpt`` when ``out_dir`` is set."""
    if not episodes:
        raise ValueError("training set is empty")
    schedule = schedule or NoiseSchedule(model.config.diffusion_steps)
    m = model.config.context
    rng = np.random.default_rng([config.seed, 0x747261696E])
    val = None
    if val_episodes:
        val = validation_pairs(val_episodes, m, config.val_pairs, np.random.default_rng([config.seed, 0x76]))
    opt = AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    result = TrainResult()
    for step in range(config.steps + 1):
        batch = make_batch(episodes, config.batch_size, config.goals, config.max_shift, m, rng, config.past_shifts)
        with Tape() as tape:
            try:
                loss = training_loss(model, batch, schedule, rng, config.prediction)
            except NonFiniteError as exc:
                raise RuntimeError(f"training diverged at step {step}: {exc}") from exc
        row = {"step": step, "loss": float(loss.item()), "val_mse": "", "baseline_mse": ""}
        if val is not None and (step % config.eval_every == 0 or step == config.steps):
            row["val_mse"], row["baseline_mse"] = one_step_mse(model, val, schedule, config.seed,
                                                               config.prediction)
        result.rows.append(row)
        if log is not None:
            log(row)
        if step == config.steps:
            break  # the last row only measures; no update after it
        model.zero_grad()
        tape.backward(loss)
        opt.step()
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_text(out_dir / "loss.csv", result.to_csv((extra_config or {}).get("config_hash")))
        save_checkpoint(out_dir / "model.ckpt", checkpoint_config(model.config, config, schedule, extra_config),
                        model.state_dict())
    return result


def checkpoint_config(model_config: ModelConfig, train_config: TrainConfig | None = None,
                      schedule: NoiseSchedule | None = None, extra: dict | None = None) -> dict:
    cfg = {"model": model_config.to_dict()}
    if train_config is not None:
        cfg["train"] = train_config.to_dict()
    if schedule is not None:
        cfg["schedule"] = asdict(schedule)
    if extra:
        cfg.update(extra)
    return cfg


def load_model(path) -> tuple[WorldModel, dict]:
    config, tensors = load_checkpoint(path)
    model_cfg = ModelConfig.from_dict(config["model"])
    model = WorldModel(model_cfg, np.random.default_rng(0))
    dtype = next(iter(tensors.values())).dtype
    model.astype(dtype)
    model.load_state_dict(tensors)
    return model, config
