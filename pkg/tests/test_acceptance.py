"""End-to-end acceptance checks; each prints one ``[acceptance N] PASS|FAIL`` line."""
import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from helpers import central_difference, randomize, rel_error
from nwm import cli
from nwm.autodiff import Tape, precision
from nwm.cdit import ModelConfig, WorldModel, count_flops, instrumented_flops
from nwm.dataset import Dataset, generate_dataset, write_dataset
from nwm.diffusion import (NoiseSchedule, TrainBatch, TrainConfig, add_noise, latent_episodes, train,
                           training_loss)
from nwm.evalkit import ate, build_eval_set, psnr, rpe
from nwm.experiments import constraint_study, horizon_study, paired_gap, planning_study, ranking_study
from nwm.io import load_checkpoint, save_checkpoint
from nwm.planner import CEMConfig, CONSTRAINTS, constraint_mask, expand_endpoint

ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = ROOT / "scripts" / "configs" / "toy.json"


@pytest.fixture
def verdict(capsys):
    def emit(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[acceptance {number}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# 1 ---------------------------------------------------------------------------

def test_full_loss_gradient_matches_finite_differences(verdict):
    cfg = ModelConfig(depth=2, dim=32, heads=4, patch_size=4, height=16, width=16, context=2)
    with precision(np.float64):
        model = WorldModel(cfg, np.random.default_rng(0))
    randomize(model, 1)  # open the zero-initialised gates so every path carries gradient
    rng = np.random.default_rng(2)
    batch = TrainBatch(rng.normal(size=(2, 2, cfg.tokens, cfg.latent_dim)),
                       rng.normal(size=(2, cfg.tokens, cfg.latent_dim)),
                       np.column_stack([rng.normal(size=(2, 3)), np.full(2, 0.25)]))
    schedule = NoiseSchedule(cfg.diffusion_steps)

    def loss_value():
        return training_loss(model, batch, schedule, np.random.default_rng(3)).item()

    with Tape() as tape:
        loss = training_loss(model, batch, schedule, np.random.default_rng(3))
    tape.backward(loss)
    analytic, numeric = [], []
    pick = np.random.default_rng(4)
    for _, p in model.named_parameters():
        for _ in range(4):
            idx = tuple(int(pick.integers(0, s)) for s in p.shape)
            analytic.append(p.grad[idx])
            numeric.append(central_difference(loss_value, p.data, idx, step=1e-6))
    err = rel_error(analytic, numeric)
    worst = max(abs(a - n) / max(abs(n), 1e-6) for a, n in zip(analytic, numeric))
    verdict(1, err < 1e-4 and worst < 1e-4,
            f"{len(analytic)} sampled entries, aggregate rel err {err:.2e}, worst entry {worst:.2e}")


# 2 ---------------------------------------------------------------------------

def r_squared(x, y, degree) -> float:
    fit = np.polyval(np.polyfit(x, y, degree), x)
    return 1.0 - np.sum((y - fit) ** 2) / np.sum((y - np.mean(y)) ** 2)


def test_attention_flop_scaling(verdict):
    contexts = [1, 2, 4, 8]
    counts = {"cdit": [], "dit": []}
    exact = True
    for variant in counts:
        for m in contexts:
            cfg = ModelConfig(context=m, dim=128, heads=4, depth=1, variant=variant)
            assert cfg.tokens == 64
            closed = count_flops(cfg)
            exact &= closed == instrumented_flops(WorldModel(cfg, np.random.default_rng(0)))
            counts[variant].append(closed["attention"])
    x = np.array(contexts, dtype=float)
    linear = r_squared(x, np.array(counts["cdit"], dtype=float), 1)
    quadratic = r_squared(x, np.array(counts["dit"], dtype=float), 2)
    ratio = counts["dit"][2] / counts["cdit"][2]
    verdict(2, linear > 0.999 and quadratic > 0.999 and ratio > 2 and exact,
            f"CDiT linear R2 {linear:.6f}, DiT quadratic R2 {quadratic:.6f}, DiT/CDiT at m=4 {ratio:.2f}, "
            f"closed form equals instrumented: {exact}")


# 3 ---------------------------------------------------------------------------

def test_forward_process_identity(verdict):
    schedule = NoiseSchedule(100)
    betas = [schedule.beta_start * 10 + k * (schedule.beta_end - schedule.beta_start) * 10 / 99 for k in range(100)]
    bars, running = [], 1.0
    for b in betas:
        running *= 1.0 - b
        bars.append(running)
    bars = np.array(bars)
    rng = np.random.default_rng(0)
    clean, eps = rng.normal(size=(2, 100, 16, 48))
    got = add_noise(clean, np.arange(100), eps, schedule)
    table = schedule.alpha_bars
    expected = np.sqrt(table)[:, None, None] * clean + np.sqrt(1.0 - table)[:, None, None] * eps
    formula_exact = np.array_equal(got, expected)
    table_close = np.allclose(table, bars, rtol=1e-13, atol=0)
    ab = schedule.alpha_bars
    monotone = bool(np.all(np.diff(schedule.betas) > 0) and np.all(np.diff(ab) < 0) and 0 < ab[-1] and ab[0] < 1)
    n = 100_000
    worst = 0.0
    for t in (0, 25, 50, 75, 99):
        draws = add_noise(rng.standard_normal(n), np.full(n, t), rng.standard_normal(n), schedule)
        worst = max(worst, abs(draws.var() - 1.0) / math.sqrt(2.0 / n))
    verdict(3, table_close and formula_exact and monotone and worst < 3,
            f"schedule table matches: {table_close}, formula exact: {formula_exact}, monotone: {monotone}, "
            f"worst variance deviation {worst:.2f} sigma")


# 4 ---------------------------------------------------------------------------

def test_learning_signal(verdict, tmp_path):
    generate_dataset(tmp_path / "train", 200, range(0, 20), seed=0)
    generate_dataset(tmp_path / "val", 60, range(100, 110), seed=1)
    cfg = ModelConfig(depth=2, dim=64, heads=4, context=2)
    tr = latent_episodes(Dataset.load(tmp_path / "train"), cfg)
    va = latent_episodes(Dataset.load(tmp_path / "val"), cfg)
    model = WorldModel(cfg, np.random.default_rng(0))
    result = train(model, tr, TrainConfig(steps=2000, lr=3e-4), val_episodes=va)
    val, baseline = result.final_val
    rows = horizon_study(model, va)
    near, far = np.mean([r["psnr@1s"] for r in rows]), np.mean([r["psnr@4s"] for r in rows])
    verdict(4, val < baseline and near > far and len(rows) >= 50,
            f"val x-MSE {val:.5f} vs copy-last {baseline:.5f}; PSNR@1s {near:.2f} dB vs @4s {far:.2f} dB "
            f"over {len(rows)} episodes")


# 5 ---------------------------------------------------------------------------

def test_planner_oracle_mode(verdict):
    trials = planning_study(100, CEMConfig(), evals=3)
    reached = sum(t["position_error"] <= 0.5 for t in trials)
    ordered = all(t["elite_energy"] <= t["population_energy"] for t in trials)
    verdict(5, reached >= 80 and ordered,
            f"{reached}/100 trials within 0.5 units; elite <= population energy on every trial: {ordered}")


# 6 ---------------------------------------------------------------------------

def test_constraint_satisfaction(verdict):
    study = constraint_study(100, CONSTRAINTS, evals=3)
    baseline = np.array([t["position_error"] for t in study["none"]])
    exact, deltas = True, {}
    for name in CONSTRAINTS[1:]:
        mask = constraint_mask(8, name)
        for t in study[name]:
            emitted = [t["actions"]] + [expand_endpoint(*e, 8, name) for tr in t["trace"] for e in tr["endpoints"]]
            exact &= all(np.all(a[:, :2][mask] == 0.0) for a in emitted)
        deltas[name] = float(np.mean([t["position_error"] for t in study[name]]) - baseline.mean())
    bounded = all(abs(d) <= 0.1 for d in deltas.values())
    detail = ", ".join(f"{k} {v:+.4f}" for k, v in deltas.items())
    verdict(6, exact and bounded,
            f"hard zeros bit-exact on every emitted sequence: {exact}; mean final-pose error delta vs "
            f"unconstrained {baseline.mean():.4f}: {detail} (bound 0.1)")


# 7 ---------------------------------------------------------------------------

def test_ranking_monotonicity(verdict):
    rows = ranking_study(100, pools=(16, 32))
    col = {k: np.array([r[f"{k}/final_error"] for r in rows]) for k in ("random", "best-of-16", "best-of-32")}
    means = {k: float(v.mean()) for k, v in col.items()}
    first = paired_gap(col["random"], col["best-of-16"])
    second = paired_gap(col["best-of-16"], col["best-of-32"])
    ok = (means["best-of-32"] <= means["best-of-16"] <= means["random"]
          and first["p_value"] < 0.05 and second["p_value"] < 0.05)
    verdict(7, ok, f"mean final-pose error random {means['random']:.4f}, best-of-16 {means['best-of-16']:.4f}, "
                   f"best-of-32 {means['best-of-32']:.4f}; Wilcoxon p {first['p_value']:.2e} and "
                   f"{second['p_value']:.2e}")


# 8 ---------------------------------------------------------------------------

def se2(pose):
    x, y, yaw = pose
    return np.array([[math.cos(yaw), -math.sin(yaw), x], [math.sin(yaw), math.cos(yaw), y], [0, 0, 1.0]])


def brute_rpe(est, ref, delta):
    trans, rot = [], []
    for i in range(len(est) - delta):
        rel_est = np.linalg.inv(se2(est[i])) @ se2(est[i + delta])
        rel_ref = np.linalg.inv(se2(ref[i])) @ se2(ref[i + delta])
        err = np.linalg.inv(rel_ref) @ rel_est
        trans.append(err[0, 2] ** 2 + err[1, 2] ** 2)
        rot.append(math.atan2(err[1, 0], err[0, 0]) ** 2)
    return math.sqrt(sum(trans) / len(trans)), math.sqrt(sum(rot) / len(rot))


def brute_ate(est, ref):
    total = 0.0
    for a, b in zip(est, ref):
        total += (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2
    return math.sqrt(total / len(est))


def brute_psnr(a, b):
    err = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    return 10 * math.log10(1.0 / err)


def test_metric_oracles(verdict):
    rng = np.random.default_rng(0)
    worst = 0.0
    invariant = True
    for _ in range(1000):
        length = int(rng.integers(3, 16))
        delta = int(rng.integers(1, length))
        ref = np.column_stack([rng.uniform(-5, 5, (length, 2)), rng.uniform(-math.pi, math.pi, length)])
        est = ref + rng.normal(0, 0.3, ref.shape)
        a, b = rng.random((4, 4, 3)), rng.random((4, 4, 3))
        worst = max(worst, abs(ate(est, ref) - brute_ate(est, ref)),
                    *np.abs(np.subtract(rpe(est, ref, delta), brute_rpe(est, ref, delta))),
                    abs(psnr(a, b) - brute_psnr(a, b)))
        g = se2(rng.uniform(-3, 3, 3))
        moved = lambda poses: np.array([[*(g @ se2(p))[:2, 2], math.atan2((g @ se2(p))[1, 0], (g @ se2(p))[0, 0])]
                                        for p in poses])
        invariant &= np.allclose(rpe(moved(est), moved(ref), delta), rpe(est, ref, delta), atol=1e-10)
        invariant &= np.allclose(rpe(moved(est), ref, delta), rpe(est, ref, delta), atol=1e-10)
    pool = {}
    planted = set(int(i) for i in rng.choice(40, size=5, replace=False))
    for i in range(40):
        k = np.arange(12)
        yaw = rng.uniform(-math.pi, math.pi)
        line = np.column_stack([0.25 * k * math.cos(yaw), 0.25 * k * math.sin(yaw), np.full(12, yaw)])
        if i in planted:
            line[:, 1] += 0.4 * (k % 2)
        pool[i] = line
    chosen = build_eval_set(pool, 5)
    selected = set(chosen) == planted and chosen == build_eval_set(dict(reversed(pool.items())), 5)
    verdict(8, worst < 1e-10 and invariant and selected,
            f"worst deviation from brute-force oracles {worst:.1e} over 1000 instances; "
            f"RPE rigid-transform invariant: {invariant}; planted episodes selected: {selected}")


# 9 ---------------------------------------------------------------------------

def pipeline(root: Path) -> None:
    config = str(TOY_CONFIG)
    small = ["--set", "train.eval_every=50", "--set", "train.val_pairs=64", "--set", "planner.population=30",
             "--set", "planner.sampling_steps=4", "--set", "metrics.eval_count=4", "--set", "metrics.sampling_steps=4"]
    steps = [
        ["gen-data", "--episodes", "24", "--out", "train"],
        ["gen-data", "--split", "val", "--episodes", "8", "--out", "val"],
        ["train", "--data", "train", "--val", "val", "--steps", "100", "--out", "run"],
        ["plan", "--checkpoint", "run/model.ckpt", "--data", "val", "--out", "plan"],
        ["eval", "--checkpoint", "run/model.ckpt", "--data", "val", "--plan", "plan/plan.json", "--out", "eval"],
    ]
    for step in steps:
        assert cli.main(step + ["--config", config] + small) == 0, step


def test_pipeline_bit_identical(verdict, tmp_path, monkeypatch):
    outputs = []
    for name in ("first", "second"):
        (tmp_path / name).mkdir()
        monkeypatch.chdir(tmp_path / name)
        pipeline(tmp_path / name)
        outputs.append(tree_bytes(tmp_path / name))
    first, second = outputs
    csvs = sorted(k for k in first if k.endswith(".csv"))
    same = first == second
    verdict(9, same and "run/model.ckpt" in first and len(csvs) >= 3,
            f"{len(first)} files compared byte-for-byte including {len(csvs)} CSVs and the checkpoint: "
            f"identical {same}")


# 10 --------------------------------------------------------------------------

class Exploding:
    """Array-like that fails when serialised, standing in for an interrupted write."""

    def __init__(self, length: int = 1):
        self.length = length
        self.shape = (length,)

    def __len__(self) -> int:
        return self.length

    def __array__(self, *args, **kwargs):
        raise KeyboardInterrupt


def test_persistence_round_trips_and_atomicity(verdict, tmp_path):
    model = WorldModel(ModelConfig(depth=1, dim=16, heads=2, height=16, width=16), np.random.default_rng(0))
    randomize(model, 1)
    save_checkpoint(tmp_path / "a.ckpt", {"note": "round trip"}, model.state_dict())
    config, tensors = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", config, tensors)
    ckpt_exact = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes() and all(
        tensors[k].tobytes() == v.tobytes() for k, v in model.state_dict().items())

    manifest = generate_dataset(tmp_path / "d1", 3, [0, 1], length=12, seed=2)
    ds = Dataset.load(tmp_path / "d1")
    extra = {k: v for k, v in manifest.items() if k == "generator"}
    write_dataset(tmp_path / "d2", [ds.episode(i) for i in range(len(ds))], extra)
    data_exact = tree_bytes(tmp_path / "d1") == tree_bytes(tmp_path / "d2")

    before = (tmp_path / "a.ckpt").read_bytes()
    with pytest.raises(KeyboardInterrupt):
        save_checkpoint(tmp_path / "a.ckpt", {}, {"w": np.zeros(3), "bad": Exploding()})
    episodes = [ds.episode(0), replace(ds.episode(1), frames=Exploding(len(ds.episode(1))))]
    with pytest.raises(KeyboardInterrupt):
        write_dataset(tmp_path / "d3", episodes)
    names = sorted(p.name for p in tmp_path.iterdir())
    atomic = (tmp_path / "a.ckpt").read_bytes() == before and names == ["a.ckpt", "b.ckpt", "d1", "d2"]
    verdict(10, ckpt_exact and data_exact and atomic,
            f"checkpoint byte-exact: {ckpt_exact}; dataset byte-exact: {data_exact}; "
            f"interrupted writes left no partial output: {atomic}")
