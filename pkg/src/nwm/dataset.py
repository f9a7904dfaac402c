"""Episode datasets: generation from the simulator and the directory format.

A dataset directory holds ``manifest.json`` and two raw little-endian blobs
per episode: frames as float32 (L*H*W*C values) and poses as float64 (L*3).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import atomic_dir
from .world import Episode, derive_actions, generate_map, render_poses, simulate_poses

FORMAT_VERSION = 1


def forward_segments(backward: np.ndarray, min_length: int) -> list[tuple[int, int]]:
    """Maximal frame ranges [a, b) containing no backward step, at least ``min_length`` frames."""
    segments, start = [], 0
    n_frames = len(backward) + 1
    for i, bad in enumerate(backward):
        if bad:
            if i + 1 - start >= min_length:
                segments.append((start, i + 1))
            start = i + 1
    if n_frames - start >= min_length:
        segments.append((start, n_frames))
    return segments


@dataclass
class Dataset:
    path: Path
    manifest: dict

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        if manifest.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset version {manifest.get('version')}")
        return cls(path, manifest)

    @property
    def fps(self) -> float:
        return self.manifest["fps"]

    @property
    def average_step_size(self) -> float:
        return self.manifest["average_step_size"]

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return tuple(self.manifest["frame_shape"])

    @property
    def entries(self) -> list[dict]:
        return self.manifest["episodes"]

    def __len__(self) -> int:
        return len(self.entries)

    def episode(self, index: int) -> Episode:
        e = self.entries[index]
        frames = np.fromfile(self.path / e["frame_file"], dtype="<f4").reshape(e["length"], *self.frame_shape)
        poses = np.fromfile(self.path / e["pose_file"], dtype="<f8").reshape(e["length"], 3)
        return Episode(frames, poses, self.fps, e["seed"])

    def actions(self, index: int) -> np.ndarray:
        e = self.entries[index]
        poses = np.fromfile(self.path / e["pose_file"], dtype="<f8").reshape(e["length"], 3)
        return derive_actions(poses, self.fps, self.average_step_size)[0]


def write_dataset(out_path, episodes: list[Episode], extra: dict | None = None,
                  overwrite: bool = False) -> dict:
    """Write episodes atomically; ``average_step_size`` is their mean inter-frame displacement."""
    steps = np.concatenate([np.linalg.norm(np.diff(ep.poses[:, :2], axis=0), axis=1) for ep in episodes])
    avg = float(steps.mean())
    if avg <= 0:
        raise ValueError("episodes contain no motion; average step size would be zero")
    manifest = {
        "version": FORMAT_VERSION,
        "fps": float(episodes[0].fps),
        "average_step_size": avg,
        "frame_shape": list(episodes[0].frames.shape[1:]),
        "episodes": [],
    }
    if extra:
        manifest.update(extra)
    with atomic_dir(out_path, overwrite=overwrite) as tmp:
        for i, ep in enumerate(episodes):
            frame_file, pose_file = f"ep{i:05d}.frames.bin", f"ep{i:05d}.poses.bin"
            (tmp / frame_file).write_bytes(np.ascontiguousarray(ep.frames, dtype="<f4").tobytes())
            (tmp / pose_file).write_bytes(np.ascontiguousarray(ep.poses, dtype="<f8").tobytes())
            manifest["episodes"].append({"id": i, "seed": int(ep.map_seed), "length": len(ep),
                                         "frame_file": frame_file, "pose_file": pose_file})
        (tmp / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def generate_episodes(num_episodes: int, map_seeds, length: int = 32, fps: float = 4.0,
                      noise_level: float = 0.05, seed: int = 0, resolution=(32, 32),
                      min_length: int = 8) -> list[Episode]:
    """Simulate expert episodes, dropping backward steps by splitting into forward segments."""
    map_seeds = list(map_seeds)
    if not map_seeds:
        raise ValueError("need at least one map seed")
    worlds = {}
    out: list[Episode] = []
    attempt = 0
    while len(out) < num_episodes:
        if attempt > 20 * num_episodes + 20:
            raise RuntimeError("could not collect enough forward segments; lower noise or min_length")
        map_seed = map_seeds[attempt % len(map_seeds)]
        world = worlds.setdefault(map_seed, generate_map(map_seed))
        rng = np.random.default_rng([seed, attempt, 0x6570])
        poses = simulate_poses(world, rng, length, fps, noise_level)
        _, backward = derive_actions(poses, fps, world.average_step_size)
        for a, b in forward_segments(backward, min_length):
            if len(out) == num_episodes:
                break
            seg = poses[a:b]
            out.append(Episode(render_poses(world, seg, resolution), seg, fps, map_seed))
        attempt += 1
    return out


def generate_dataset(out_path, num_episodes: int, map_seeds, length: int = 32, fps: float = 4.0,
                     noise_level: float = 0.05, seed: int = 0, resolution=(32, 32),
                     min_length: int = 8, overwrite: bool = False, extra: dict | None = None) -> dict:
    episodes = generate_episodes(num_episodes, map_seeds, length, fps, noise_level, seed,
                                 resolution, min_length)
    info = {"generator": {"num_episodes": num_episodes, "map_seeds": [int(s) for s in map_seeds],
                          "length": length, "noise_level": noise_level, "seed": seed,
                          "min_length": min_length}}
    if extra:
        info.update(extra)
    return write_dataset(out_path, episodes, info, overwrite=overwrite)

