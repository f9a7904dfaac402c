"""Command-line entry point: ``nwm <command> [options]``.

Every command resolves a :class:`RunConfig` (defaults, then ``--config``,
then ``--set section.key=value``, then command flags), builds its outputs in
a temporary directory that is renamed into place on success, and records the
resolved config and its hash next to the outputs.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .cdit import ModelConfig, WorldModel, count_flops, decode, encode, instrumented_flops
from .config import RunConfig, stream_seed
from .dataset import Dataset, generate_dataset
from .diffusion import LatentEpisode, NoiseSchedule, latent_episodes, load_model, one_step_mse, train, validation_pairs
from .evalkit import ate, build_eval_set, report, rpe, to_csv
from .experiments import horizon_study, paired_gap, planning_trial, ranking_study
from .io import atomic_dir, write_json, write_text
from .planner import CEMConfig, EnergySpec, LearnedSimulator, OracleSimulator, cem_plan, expand_endpoint
from .rollout import evaluate_prediction, rollout, rows_to_csv
from .world import Pose, generate_map, integrate_actions, render

OUTPUT_ROOT_ENV = "NWM_OUTPUT_ROOT"


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


# --- shared helpers ------------------------------------------------------------

def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def resolve_out(args, command: str, cfg: RunConfig) -> Path:
    return Path(args.out) if args.out else output_root() / f"{command}-{cfg.hash}"


def resolve_config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        cfg = cfg.override(args.set or [])
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        return cfg
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def with_overrides(cfg: RunConfig, pairs: dict) -> RunConfig:
    """Apply command flags given as {"section.key": value or None}."""
    sets = [f"{k}={json.dumps(v)}" for k, v in pairs.items() if v is not None]
    try:
        return cfg.override(sets) if sets else cfg
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def write_run_config(directory: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> None:
    record = {"command": command, "config": cfg.to_dict(), "config_hash": cfg.hash}
    if extra:
        record.update(extra)
    write_json(directory / "config.json", record)


def schedule_from(checkpoint_config: dict) -> NoiseSchedule:
    return NoiseSchedule(**checkpoint_config["schedule"])


def load_checked_model(path) -> tuple[WorldModel, dict]:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    try:
        return load_model(path)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from exc


def load_dataset(path, model_config: ModelConfig | None = None) -> Dataset:
    if not (Path(path) / "manifest.json").is_file():
        raise UsageError(f"{path} is not a dataset directory")
    ds = Dataset.load(path)
    if model_config is not None and tuple(ds.frame_shape) != model_config.frame_shape:
        raise UsageError(f"dataset frames {tuple(ds.frame_shape)} do not match the model's "
                         f"{model_config.frame_shape}")
    return ds


def floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def jsonable(obj):
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# --- commands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    split = args.split
    cfg = with_overrides(cfg, {f"data.{split}_episodes": args.episodes, "data.length": args.length})
    data = cfg.data
    count = data.train_episodes if split == "train" else data.val_episodes
    maps = range(*(data.train_maps if split == "train" else data.val_maps))
    out = resolve_out(args, f"data-{split}", cfg)
    try:
        manifest = generate_dataset(out, count, maps, data.length, data.fps, data.noise_level,
                                    stream_seed(cfg.seed, f"data/{split}"), (data.resolution, data.resolution),
                                    data.min_length, overwrite=args.force,
                                    extra={"config": cfg.to_dict(), "config_hash": cfg.hash, "split": split})
    except FileExistsError as exc:
        raise UsageError(str(exc)) from exc
    print(json.dumps({"out": str(out), "episodes": len(manifest["episodes"]), "config_hash": cfg.hash}))
    return 0


def cmd_train(args) -> int:
    cfg = with_overrides(resolve_config(args), {"train.steps": args.steps, "train.lr": args.lr})
    train_ds = load_dataset(args.data, cfg.model)
    val_ds = load_dataset(args.val, cfg.model) if args.val else None
    schedule = NoiseSchedule(cfg.model.diffusion_steps, cfg.schedule.beta_start, cfg.schedule.beta_end)
    model = WorldModel(cfg.model, np.random.default_rng(stream_seed(cfg.seed, "init")))
    episodes = latent_episodes(train_ds, cfg.model)
    val = latent_episodes(val_ds, cfg.model) if val_ds else None
    out = resolve_out(args, "train", cfg)
    printer = (lambda row: log(f"step {row['step']}: loss {row['loss']:.5f}"
                               + (f" val {row['val_mse']:.5f} (copy-last {row['baseline_mse']:.5f})"
                                  if row["val_mse"] != "" else ""))
               if args.verbose else None)
    with atomic_dir(out, overwrite=args.force) as tmp:
        result = train(model, episodes, cfg.train_config(), schedule, val, out_dir=tmp,
                       extra_config={"config_hash": cfg.hash, "run": cfg.to_dict()}, log=printer)
        write_run_config(tmp, "train", cfg, {"data": str(args.data), "val": args.val})
    summary = {"out": str(out), "final_loss": result.rows[-1]["loss"], "config_hash": cfg.hash}
    if val:
        summary["val_mse"], summary["baseline_mse"] = result.final_val
    print(json.dumps(summary))
    return 0


def cmd_rollout(args) -> int:
    cfg = resolve_config(args)
    if args.horizons:
        cfg = with_overrides(cfg, {"metrics.horizons": floats(args.horizons)})
    model, ckpt = load_checked_model(args.checkpoint)
    ds = load_dataset(args.data, model.config)
    schedule = schedule_from(ckpt)
    m = model.config.context
    steps = int(round(max(cfg.metrics.horizons) * ds.fps))
    ids = [i for i in range(len(ds)) if ds.entries[i]["length"] >= m + steps][:args.episodes]
    if not ids:
        raise UsageError(f"no episode has the {m + steps} frames the longest horizon needs")
    sample_seed = stream_seed(cfg.seed, "sample")
    out = resolve_out(args, "rollout", cfg)
    rows, blobs = [], []
    for i in ids:
        ep = ds.episode(i)
        latents = encode(ep.frames, model.config)
        traj = rollout(model, latents[:m], ds.actions(i)[m - 1:m - 1 + steps], schedule,
                       seed=[sample_seed + i], num_steps=cfg.metrics.sampling_steps)
        frames = decode(traj.states[0], model.config)
        blobs.append(frames.astype("<f4").tobytes())
        for row in evaluate_prediction(frames, ep.frames[m:m + steps], cfg.metrics.horizons, ds.fps):
            rows.append({"episode": i, **row})
    with atomic_dir(out, overwrite=args.force) as tmp:
        (tmp / "frames.bin").write_bytes(b"".join(blobs))
        write_text(tmp / "metrics.csv", rows_to_csv(rows, cfg.hash))
        write_run_config(tmp, "rollout", cfg, {
            "checkpoint": str(args.checkpoint), "data": str(args.data), "episodes": ids,
            "frames": {"file": "frames.bin", "dtype": "<f4", "shape": [len(ids), steps, *model.config.frame_shape]},
        })
    means = {f"psnr@{h:g}s": float(np.mean([r["psnr"] for r in rows if r["horizon_s"] == h]))
             for h in cfg.metrics.horizons}
    print(json.dumps({"out": str(out), "episodes": len(ids), **means}))
    return 0


def cem_config(cfg: RunConfig) -> CEMConfig:
    p = cfg.planner
    return CEMConfig(p.population, p.elite_fraction, p.iterations, tuple(p.mean), tuple(p.var), p.steps, p.dt,
                     p.var_floor, p.constraint)


def cmd_plan(args) -> int:
    cfg = with_overrides(resolve_config(args), {
        "planner.constraint": args.constraint, "planner.population": args.population,
        "planner.iterations": args.iterations, "planner.evals": args.evals_per_candidate,
        "planner.steps": args.steps, "planner.dt": args.dt})
    try:
        cem = cem_config(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    plan_seed = stream_seed(cfg.seed, "plan")
    out = resolve_out(args, "plan", cfg)
    frames = None
    if args.oracle:
        trial = planning_trial(args.trial, cem, cfg.planner.evals, cfg.planner.oracle_step_size, seed=plan_seed)
        record = {"mode": "oracle", **{k: v for k, v in trial.items() if k != "trace"}, "trace": trial["trace"]}
    else:
        if not (args.checkpoint and args.data):
            raise UsageError("learned planning needs --checkpoint and --data (or use --oracle)")
        model, ckpt = load_checked_model(args.checkpoint)
        ds = load_dataset(args.data, model.config)
        if not 0 <= args.episode < len(ds):
            raise UsageError(f"episode {args.episode} not in dataset of {len(ds)}")
        ep = ds.episode(args.episode)
        m = model.config.context
        goal_index = min(m - 1 + cem.steps, len(ep) - 1)
        sim = LearnedSimulator(model, encode(ep.frames[:m], model.config), schedule_from(ckpt),
                               cfg.planner.sampling_steps)
        spec = EnergySpec(ep.frames[goal_index], cfg.planner.feature_weight, penalty=cfg.planner.penalty,
                          evals=cfg.planner.evals)
        result = cem_plan(sim, spec, cem, seed=plan_seed)
        # execute the plan in the episode's ground-truth map and keep the recorded path to the goal frame
        world = generate_map(ds.entries[args.episode]["seed"])
        start, goal = Pose.from_array(ep.poses[m - 1]), ep.poses[goal_index]
        poses = OracleSimulator(world, start, world.average_step_size).poses(result.best.actions)
        record = {"mode": "learned", "episode": args.episode, "goal_index": goal_index,
                  "endpoint": result.best.endpoint, "actions": result.best.actions, "energy": result.best.energy,
                  "energies": result.best.energies, "all_invalid": result.all_invalid,
                  "start": start.as_array(), "goal": goal, "poses": poses, "reference": ep.poses[m - 1:goal_index + 1],
                  "position_error": float(np.hypot(*(poses[-1, :2] - goal[:2]))), "trace": result.trace}
        if args.save_frames:
            frames = sim.frames(result.best.actions[None], [plan_seed])[0]
    record["config_hash"] = cfg.hash
    with atomic_dir(out, overwrite=args.force) as tmp:
        if frames is not None:
            (tmp / "frames.bin").write_bytes(np.ascontiguousarray(frames, dtype="<f4").tobytes())
            record["frames"] = {"file": "frames.bin", "dtype": "<f4", "shape": list(frames.shape)}
        write_json(tmp / "plan.json", jsonable(record))
        write_run_config(tmp, "plan", cfg)
    print(json.dumps(jsonable({"out": str(out), "endpoint": record["endpoint"], "energy": record["energy"]})))
    return 0


def cmd_rank(args) -> int:
    cfg = with_overrides(resolve_config(args), {"planner.evals": args.evals_per_candidate,
                                                "metrics.rank_noise": args.noise})
    if args.pool < 1 or args.trials < 1:
        raise UsageError("--pool and --trials must be positive")
    make_simulator, resolution = None, (cfg.data.resolution, cfg.data.resolution)
    if args.checkpoint:
        model, ckpt = load_checked_model(args.checkpoint)
        resolution = model.config.frame_shape[:2]
        schedule = schedule_from(ckpt)

        def make_simulator(world, start):
            context = encode(render(world, start, resolution)[None], model.config)
            return LearnedSimulator(model, context, schedule, cfg.planner.sampling_steps)

    rows = ranking_study(args.trials, (args.pool,), cfg.metrics.rank_noise, cfg.planner.evals,
                         seed=stream_seed(cfg.seed, "rank"), make_simulator=make_simulator, resolution=resolution)
    best = f"best-of-{args.pool}"
    summary = {
        "pool": args.pool, "trials": args.trials, "scorer": "learned" if args.checkpoint else "oracle",
        "mean_final_error": {k: float(np.mean([r[f"{k}/final_error"] for r in rows])) for k in ("random", best)},
        "mean_ate": {k: float(np.mean([r[f"{k}/ate"] for r in rows])) for k in ("random", best)},
        "random_vs_best": paired_gap([r["random/final_error"] for r in rows], [r[f"{best}/final_error"] for r in rows]),
        "config_hash": cfg.hash,
    }
    out = resolve_out(args, f"rank{args.pool}", cfg)
    with atomic_dir(out, overwrite=args.force) as tmp:
        write_text(tmp / "rank.csv", to_csv(rows, cfg.hash))
        write_json(tmp / "summary.json", summary)
        write_run_config(tmp, "rank", cfg)
    print(json.dumps({"out": str(out), **summary["mean_final_error"]}))
    return 0


def plan_rows(paths, delta: int) -> list[dict]:
    """Executed plans against a reference path.

    Oracle plans compare with the straight-line path to their goal endpoint;
    learned plans with the recorded episode path to the goal frame.
    """
    rows = []
    for path in paths:
        plan = json.loads(Path(path).read_text())
        if "poses" not in plan:
            raise UsageError(f"{path}: plan carries no executed poses")
        poses = np.array(plan["poses"])
        if plan.get("mode") == "learned":
            reference = np.array(plan["reference"])
            poses = poses[:len(reference)]  # the episode may end before the plan does
        else:
            reference = integrate_actions(Pose.from_array(plan["start"]),
                                          expand_endpoint(*plan["goal_endpoint"], len(poses) - 1), 1.0)
        if len(reference) <= delta:
            raise UsageError(f"{path}: reference path too short for RPE delta {delta}")
        trans, rot = rpe(poses, reference, delta)
        rows.append({"plan": str(path), "final_error": plan["position_error"], "ate": ate(poses, reference),
                     "rpe_translation": trans, "rpe_rotation": rot})
    return rows


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    if args.horizons:
        cfg = with_overrides(cfg, {"metrics.horizons": floats(args.horizons)})
    if args.count is not None:
        cfg = with_overrides(cfg, {"metrics.eval_count": args.count})
    out = resolve_out(args, "eval", cfg)
    summary: dict = {"config_hash": cfg.hash}
    with atomic_dir(out, overwrite=args.force) as tmp:
        if args.checkpoint:
            model, ckpt = load_checked_model(args.checkpoint)
            if not args.data:
                raise UsageError("--checkpoint needs --data")
            ds = load_dataset(args.data, model.config)
            ids = build_eval_set(ds, min(cfg.metrics.eval_count, len(ds)))
            episodes = [latent_episodes_subset(ds, model.config, i) for i in ids]
            schedule = schedule_from(ckpt)
            pairs = validation_pairs(episodes, model.config.context, 256,
                                     np.random.default_rng(stream_seed(cfg.seed, "eval/pairs")))
            summary["one_step_mse"], summary["copy_last_mse"] = one_step_mse(
                model, pairs, schedule, stream_seed(cfg.seed, "sample"))
            rows = horizon_study(model, episodes, cfg.metrics.horizons, ds.fps, schedule,
                                 cfg.metrics.sampling_steps, seed=stream_seed(cfg.seed, "sample"))
            summary["eval_set"] = ids
            summary["horizon_episodes"] = len(rows)
            if rows:
                keys = [k for k in rows[0] if k != "episode"]
                for r in rows:
                    r["episode"] = ids[r["episode"]]
                write_text(tmp / "horizons.csv", to_csv(rows, cfg.hash))
                means = [float(np.mean([r[k] for r in rows])) for k in keys]
                report({k: [r[k] for r in rows] for k in keys}, tmp / "horizon_summary", "PSNR by horizon (dB)",
                       curves={"mean PSNR": (list(cfg.metrics.horizons), means)}, config_hash=cfg.hash)
                summary["mean_psnr"] = dict(zip(keys, means))
        if args.plan:
            prow = plan_rows(args.plan, cfg.metrics.rpe_delta)
            write_text(tmp / "plans.csv", to_csv(prow, cfg.hash))
            report({k: [r[k] for r in prow] for k in ("final_error", "ate", "rpe_translation")},
                   tmp / "plan_summary", "Executed plans (map units)", config_hash=cfg.hash)
            summary["plans"] = {k: float(np.mean([r[k] for r in prow])) for k in ("final_error", "ate")}
        if not args.checkpoint and not args.plan:
            raise UsageError("nothing to evaluate: give --checkpoint/--data and/or --plan")
        write_json(tmp / "summary.json", jsonable(summary))
        write_run_config(tmp, "eval", cfg)
    print(json.dumps(jsonable({"out": str(out), **{k: v for k, v in summary.items() if k != "eval_set"}})))
    return 0


def latent_episodes_subset(ds: Dataset, config: ModelConfig, index: int) -> LatentEpisode:
    return LatentEpisode(encode(ds.episode(index).frames, config), ds.actions(index))


def r_squared(x, y, degree: int) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) <= degree:
        return float("nan")  # any curve of this degree interpolates the points
    fit = np.polyval(np.polyfit(x, y, degree), x)
    total = np.sum((y - y.mean()) ** 2)
    return 1.0 if total == 0 else float(1.0 - np.sum((y - fit) ** 2) / total)


def bench_rows(contexts, resolution: int, patch_size: int, dim: int, depth: int, heads: int,
               repeats: int = 1, timed: bool = True) -> list[dict]:
    rows = []
    for variant in ("cdit", "dit"):
        for m in contexts:
            cfg = ModelConfig(depth=depth, dim=dim, heads=heads, patch_size=patch_size, height=resolution,
                              width=resolution, context=m, variant=variant)
            model = WorldModel(cfg, np.random.default_rng(0))
            closed, counted = count_flops(cfg), instrumented_flops(model)
            seconds = float("nan")
            if timed:
                start = time.perf_counter()
                for r in range(repeats):
                    instrumented_flops(model, seed=r)
                seconds = (time.perf_counter() - start) / repeats
            rows.append({"variant": variant, "context": m, "tokens": cfg.tokens, "dim": dim,
                         "closed_form_flops": closed["total"], "instrumented_flops": counted["total"],
                         "attention_flops": closed["attention"],
                         "instrumented_attention_flops": counted["attention"],
                         "match": closed == {k: counted.get(k) for k in closed},
                         "seconds_per_forward": seconds})
    return rows


def bench_fits(rows) -> dict:
    fits = {}
    for variant in ("cdit", "dit"):
        sel = [r for r in rows if r["variant"] == variant]
        ms = [r["context"] for r in sel]
        att = [r["attention_flops"] for r in sel]
        fits[variant] = {"linear_r2": r_squared(ms, att, 1), "quadratic_r2": r_squared(ms, att, 2)}
    at4 = {r["variant"]: r["attention_flops"] for r in rows if r["context"] == 4}
    if len(at4) == 2:
        fits["dit_over_cdit_attention_at_m4"] = at4["dit"] / at4["cdit"]
    fits["all_match"] = all(r["match"] for r in rows)
    return fits


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    rows = bench_rows(ints(args.contexts), args.resolution, args.patch_size, args.dim, args.depth, args.heads,
                      args.repeats)
    fits = bench_fits(rows)
    fits["config_hash"] = cfg.hash
    out = resolve_out(args, "bench", cfg)
    with atomic_dir(out, overwrite=args.force) as tmp:
        write_text(tmp / "bench.csv", to_csv(rows, cfg.hash))
        write_json(tmp / "fits.json", fits)
        write_run_config(tmp, "bench", cfg)
    print(json.dumps({"out": str(out), **fits}))
    return 0 if fits["all_match"] else 1


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nwm", description="Desk-scale navigation world model toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command>-<hash>)")
        p.add_argument("--force", action="store_true", help="replace a non-empty output directory")
        return p

    p = command("gen-data", cmd_gen_data, "simulate an episode dataset")
    p.add_argument("--split", choices=("train", "val"), default="train")
    p.add_argument("--episodes", type=int)
    p.add_argument("--length", type=int)

    p = command("train", cmd_train, "train the world model")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--verbose", action="store_true")

    p = command("rollout", cmd_rollout, "autoregressive rollouts with ground-truth actions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--horizons", help="comma-separated seconds")

    p = command("plan", cmd_plan, "plan toward a goal with CEM")
    p.add_argument("--constraint", choices=("none", "forward-first", "left-right-first", "straight-then-forward"))
    p.add_argument("--population", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--evals-per-candidate", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--oracle", action="store_true", help="plan with the ground-truth simulator in an empty room")
    p.add_argument("--trial", type=int, default=0, help="oracle goal index")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--episode", type=int, default=0)
    p.add_argument("--save-frames", action="store_true")

    p = command("rank", cmd_rank, "rank noisy-expert trajectory pools")
    p.add_argument("--pool", type=int, default=32)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--noise", type=float)
    p.add_argument("--evals-per-candidate", type=int)
    p.add_argument("--checkpoint", help="score with the world model instead of the simulator")

    p = command("eval", cmd_eval, "prediction metrics on the eval set and/or plan metrics")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--count", type=int)
    p.add_argument("--horizons")
    p.add_argument("--plan", nargs="+", help="plan.json files written by the plan command")

    p = command("bench", cmd_bench, "FLOP and latency sweep over context sizes")
    p.add_argument("--contexts", default="1,2,4,8")
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--patch-size", type=int, default=4)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--repeats", type=int, default=3)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"nwm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"nwm {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
