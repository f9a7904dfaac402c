"""Grid-world raycaster: maps, egocentric rendering, a scripted expert and pose/action bookkeeping.

Map coordinates: cell ``grid[i, j]`` covers x in [j, j+1), y in [i, i+1).
Yaw is measured counter-clockwise from +x. An action's translation ``u`` is
expressed in the frame of the pose it starts from (x forward, y left), in
units of ``step_size`` map units; the pose update is

    position' = position + R(yaw) @ u * step_size,   yaw' = wrap(yaw + phi).
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi
DEFAULT_FOV = math.radians(66.0)
DEFAULT_STEP = 0.25  # map units per frame: 1 unit/s at 4 fps
AGENT_RADIUS = 0.2

# RGB per wall texture id (index 0 unused: free space)
PALETTE = np.array([
    [0.0, 0.0, 0.0],
    [0.85, 0.25, 0.20],
    [0.20, 0.65, 0.25],
    [0.25, 0.35, 0.85],
    [0.90, 0.80, 0.25],
    [0.70, 0.30, 0.75],
    [0.25, 0.75, 0.80],
    [0.95, 0.55, 0.15],
    [0.55, 0.55, 0.55],
])
SKY_TOP = np.array([0.35, 0.55, 0.90])
SKY_HORIZON = np.array([0.75, 0.85, 0.95])
FLOOR = np.array([0.45, 0.40, 0.35])


def wrap_angle(a):
    """Wrap to [-pi, pi); angles already in range are returned unchanged."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + math.pi, TWO_PI) - math.pi
    w = np.where(w >= math.pi, w - TWO_PI, w)
    w = np.where((a >= -math.pi) & (a < math.pi), a, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    yaw: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.yaw)):
            raise ValueError("pose must be finite")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])

    @classmethod
    def from_array(cls, a) -> "Pose":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class NavAction:
    """Translation ``u`` (step units, forward/left), yaw change ``phi`` and time shift ``k`` seconds."""

    u: tuple[float, float]
    phi: float
    k: float

    T_MIN = -16.0
    T_MAX = 16.0

    def __post_init__(self):
        u = (float(self.u[0]), float(self.u[1]))
        if not all(math.isfinite(c) for c in u):
            raise ValueError("translation must be finite")
        if not self.T_MIN <= self.k <= self.T_MAX:
            raise ValueError(f"time shift {self.k} outside [{self.T_MIN}, {self.T_MAX}]")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "phi", wrap_angle(self.phi))

    def as_array(self) -> np.ndarray:
        return np.array([self.u[0], self.u[1], self.phi, self.k])

    @classmethod
    def from_array(cls, a) -> "NavAction":
        return cls((float(a[0]), float(a[1])), float(a[2]), float(a[3]))


@dataclass
class WorldMap:
    seed: int
    grid: np.ndarray
    average_step_size: float = DEFAULT_STEP
    free_cells: list = field(default_factory=list)

    def __post_init__(self):
        if self.average_step_size <= 0:
            raise ValueError("average_step_size must be positive")
        if not self.free_cells:
            self.free_cells = [(int(i), int(j)) for i, j in zip(*np.nonzero(self.grid == 0))]

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def wall_at(self, x: float, y: float) -> bool:
        i, j = math.floor(y), math.floor(x)
        rows, cols = self.grid.shape
        if not (0 <= i < rows and 0 <= j < cols):
            return True
        return bool(self.grid[i, j] > 0)

    def clear(self, x: float, y: float, radius: float = AGENT_RADIUS) -> bool:
        return not any(self.wall_at(x + dx, y + dy)
                       for dx in (-radius, radius) for dy in (-radius, radius))

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return math.floor(y), math.floor(x)

    def random_pose(self, rng: np.random.Generator) -> Pose:
        i, j = self.free_cells[rng.integers(len(self.free_cells))]
        return Pose(j + 0.5, i + 0.5, rng.uniform(-math.pi, math.pi))


def _largest_component(free: np.ndarray) -> np.ndarray:
    labels = np.zeros(free.shape, dtype=np.int32)
    best, best_size, label = 0, 0, 0
    for start in zip(*np.nonzero(free)):
        if labels[start]:
            continue
        label += 1
        size = len(flood_fill(free, start, labels, label))
        if size > best_size:
            best, best_size = label, size
    return labels == best


def flood_fill(free: np.ndarray, start, labels=None, label: int = 1) -> list:
    """Cells 4-connected to ``start`` through ``free``."""
    if labels is None:
        labels = np.zeros(free.shape, dtype=np.int32)
    rows, cols = free.shape
    labels[start] = label
    seen = [start]
    queue = deque([start])
    while queue:
        i, j = queue.popleft()
        for ni, nj in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)):
            if 0 <= ni < rows and 0 <= nj < cols and free[ni, nj] and not labels[ni, nj]:
                labels[ni, nj] = label
                seen.append((ni, nj))
                queue.append((ni, nj))
    return seen


def is_connected(grid: np.ndarray) -> bool:
    free = grid == 0
    cells = list(zip(*np.nonzero(free)))
    return bool(cells) and len(flood_fill(free, cells[0])) == len(cells)


def _bordered(size: int) -> np.ndarray:
    grid = np.zeros((size, size), dtype=np.int8)
    grid[0, :] = 1
    grid[-1, :] = 2
    grid[:, 0] = 3
    grid[:, -1] = 4
    return grid


def empty_room(size: int = 8, seed: int = 0) -> WorldMap:
    """Square room whose four walls carry distinct textures."""
    return WorldMap(seed=seed, grid=_bordered(size))


def generate_map(seed: int, size: int = 12, density: float = 0.18) -> WorldMap:
    """Deterministic bordered map with scattered textured blocks and connected free space."""
    rng = np.random.default_rng([seed, 0x6D6170])
    grid = _bordered(size)
    inner = rng.random((size - 2, size - 2)) < density
    textures = rng.integers(5, len(PALETTE), size=(size - 2, size - 2))
    grid[1:-1, 1:-1] = np.where(inner, textures, 0)
    keep = _largest_component(grid == 0)
    grid[(grid == 0) & ~keep] = 8
    return WorldMap(seed=seed, grid=grid)


def render(world: WorldMap, pose: Pose, resolution=(32, 32), fov: float = DEFAULT_FOV) -> np.ndarray:
    """Column raycast with distance shading; returns an (H, W, 3) float32 image in [0, 1]."""
    h, w = resolution
    if world.wall_at(pose.x, pose.y):
        raise ValueError(f"pose {pose} is inside a wall")
    grid = world.grid
    px, py = pose.x, pose.y
    dx, dy = math.cos(pose.yaw), math.sin(pose.yaw)
    half = math.tan(fov / 2)
    cam = 1.0 - 2.0 * (np.arange(w) + 0.5) / w
    rdx = dx - dy * half * cam
    rdy = dy + dx * half * cam

    with np.errstate(divide="ignore"):
        ddx = np.where(rdx == 0, 1e30, np.abs(1.0 / rdx))
        ddy = np.where(rdy == 0, 1e30, np.abs(1.0 / rdy))
    mx = np.full(w, math.floor(px))
    my = np.full(w, math.floor(py))
    sx = np.where(rdx < 0, -1, 1)
    sy = np.where(rdy < 0, -1, 1)
    side_x = np.where(rdx < 0, (px - mx) * ddx, (mx + 1.0 - px) * ddx)
    side_y = np.where(rdy < 0, (py - my) * ddy, (my + 1.0 - py) * ddy)
    hit = np.zeros(w, dtype=bool)
    side = np.zeros(w, dtype=np.int8)
    tex = np.zeros(w, dtype=np.int64)
    for _ in range(2 * sum(grid.shape) + 4):
        live = ~hit
        if not live.any():
            break
        go_x = live & (side_x < side_y)
        go_y = live & ~go_x
        side_x = np.where(go_x, side_x + ddx, side_x)
        side_y = np.where(go_y, side_y + ddy, side_y)
        mx = np.where(go_x, mx + sx, mx)
        my = np.where(go_y, my + sy, my)
        side = np.where(go_x, 0, np.where(go_y, 1, side))
        cell = grid[np.clip(my, 0, grid.shape[0] - 1), np.clip(mx, 0, grid.shape[1] - 1)]
        new = live & (cell > 0)
        tex = np.where(new, cell, tex)
        hit |= new
    perp = np.where(side == 0, side_x - ddx, side_y - ddy)
    perp = np.maximum(perp, 1e-3)
    wall_u = np.where(side == 0, py + perp * rdy, px + perp * rdx)
    wall_u = wall_u - np.floor(wall_u)
    pattern = 0.8 + 0.2 * np.cos(4.0 * math.pi * wall_u)
    wall_rgb = PALETTE[tex] * (pattern / (1.0 + 0.2 * perp))[:, None]

    rows = np.arange(h, dtype=np.float64)[:, None]
    span = h / perp
    top = h / 2 - span / 2
    bottom = h / 2 + span / 2
    cover = np.clip(np.minimum(rows + 1, bottom) - np.maximum(rows, top), 0.0, 1.0)

    centre = rows[:, 0] + 0.5
    img = np.empty((h, w, 3))
    sky = centre < h / 2
    frac = (centre[sky] / (h / 2))[:, None]
    img[sky] = (SKY_TOP * (1 - frac) + SKY_HORIZON * frac)[:, None, :]
    below = ~sky
    dist = (h / (2.0 * centre[below] - h))[:, None]
    fx = px + dist * rdx[None, :]
    fy = py + dist * rdy[None, :]
    floor_pat = (0.85 + 0.15 * np.cos(TWO_PI * fx) * np.cos(TWO_PI * fy)) / (1.0 + 0.2 * dist)
    img[below] = FLOOR * floor_pat[..., None]
    img = cover[..., None] * wall_rgb[None, :, :] + (1.0 - cover[..., None]) * img
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def step_pose(world: WorldMap | None, pose: Pose, action: NavAction, step_size: float) -> Pose:
    """Apply one action; with a map, a move that would hit a wall leaves the position unchanged."""
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    ux, uy = action.u
    x = pose.x + (c * ux - s * uy) * step_size
    y = pose.y + (s * ux + c * uy) * step_size
    if world is not None and not world.clear(x, y):
        x, y = pose.x, pose.y
    return Pose(x, y, pose.yaw + action.phi)


def integrate_actions(start: Pose, actions, step_size: float) -> np.ndarray:
    """Poses (len+1, 3) reached by applying ``actions`` (rows [ux, uy, phi, k]) without collisions."""
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, 4)
    out = np.empty((len(actions) + 1, 3))
    out[0] = start.as_array()
    for i, (ux, uy, phi, _) in enumerate(actions):
        x, y, yaw = out[i]
        c, s = math.cos(yaw), math.sin(yaw)
        out[i + 1] = (x + (c * ux - s * uy) * step_size,
                      y + (s * ux + c * uy) * step_size,
                      wrap_angle(yaw + phi))
    return out


def derive_actions(poses, fps: float, average_step_size: float):
    """Actions between consecutive poses plus a per-step backward-motion flag.

    Returns (actions (L-1, 4) as [ux, uy, phi, k], backward (L-1,) bool).
    """
    if average_step_size == 0:
        raise ValueError("average_step_size must be non-zero")
    poses = np.asarray(poses, dtype=np.float64)
    if len(poses) < 2:
        raise ValueError("need at least two poses")
    d = poses[1:, :2] - poses[:-1, :2]
    yaw = poses[:-1, 2]
    c, s = np.cos(yaw), np.sin(yaw)
    fwd = (c * d[:, 0] + s * d[:, 1]) / average_step_size
    lat = (-s * d[:, 0] + c * d[:, 1]) / average_step_size
    phi = wrap_angle(poses[1:, 2] - poses[:-1, 2])
    k = np.full(len(d), 1.0 / fps)
    actions = np.stack([fwd, lat, np.atleast_1d(phi), k], axis=1)
    return actions, fwd < 0


def bfs_path(world: WorldMap, start: tuple[int, int], goal: tuple[int, int]) -> list | None:
    """Shortest 4-connected cell path from ``start`` to ``goal`` (inclusive), or None."""
    free = world.grid == 0
    if not (free[start] and free[goal]):
        return None
    prev = {start: None}
    queue = deque([start])
    rows, cols = free.shape
    while queue:
        cur = queue.popleft()
        if cur == goal:
            path = []
            while cur is not None:
                path.append(cur)
                cur = prev[cur]
            return path[::-1]
        i, j = cur
        for nxt in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)):
            if 0 <= nxt[0] < rows and 0 <= nxt[1] < cols and free[nxt] and nxt not in prev:
                prev[nxt] = cur
                queue.append(nxt)
    return None


def expert_policy(world: WorldMap, pose: Pose, goal: Pose, noise_level: float = 0.0,
                  rng: np.random.Generator | None = None, fps: float = 4.0,
                  step_size: float | None = None, turn_threshold: float = 0.35,
                  max_turn: float = math.pi / 2, yaw_noise: float = 0.5) -> NavAction:
    """Follow the BFS cell path toward ``goal``: turn in place when misaligned, else step forward.

    The translation perturbation scales with the commanded step, so turning in
    place never picks up translational noise.
    """
    step_size = world.average_step_size if step_size is None else step_size
    path = bfs_path(world, world.cell_of(pose.x, pose.y), world.cell_of(goal.x, goal.y))
    if path is None:
        raise ValueError("goal is unreachable from the current pose")
    if len(path) <= 2:
        wx, wy = goal.x, goal.y
    else:
        i, j = path[1]
        wx, wy = j + 0.5, i + 0.5
    dist = math.hypot(wx - pose.x, wy - pose.y)
    dyaw = wrap_angle(math.atan2(wy - pose.y, wx - pose.x) - pose.yaw) if dist > 1e-9 else 0.0
    if abs(dyaw) > turn_threshold:
        u = np.zeros(2)
        phi = float(np.clip(dyaw, -max_turn, max_turn))
    else:
        u = np.array([min(step_size, dist) / step_size, 0.0])
        phi = dyaw
    if noise_level > 0:
        if rng is None:
            raise ValueError("a noisy policy needs an rng")
        u = u + noise_level * abs(u[0]) * rng.standard_normal(2)
        phi = phi + noise_level * yaw_noise * rng.standard_normal()
    return NavAction((u[0], u[1]), phi, 1.0 / fps)


def pick_goal(world: WorldMap, pose: Pose, rng: np.random.Generator, min_cells: int = 3) -> Pose:
    start = world.cell_of(pose.x, pose.y)
    for _ in range(100):
        goal = world.random_pose(rng)
        path = bfs_path(world, start, world.cell_of(goal.x, goal.y))
        if path is not None and len(path) - 1 >= min_cells:
            return goal
    return world.random_pose(rng)


@dataclass
class Episode:
    frames: np.ndarray  # (L, H, W, C) float32 in [0, 1]
    poses: np.ndarray  # (L, 3) float64
    fps: float
    map_seed: int

    def __post_init__(self):
        if len(self.frames) != len(self.poses) or len(self.poses) < 2:
            raise ValueError("episode needs matching frames and poses, at least two")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    def __len__(self) -> int:
        return len(self.poses)

    def actions(self, average_step_size: float) -> np.ndarray:
        return derive_actions(self.poses, self.fps, average_step_size)[0]


def simulate_poses(world: WorldMap, rng: np.random.Generator, length: int, fps: float = 4.0,
                   noise_level: float = 0.0, goal_tolerance: float = 0.3) -> np.ndarray:
    """Expert-driven pose sequence; a fresh goal is drawn whenever the current one is reached."""
    pose = world.random_pose(rng)
    while not world.clear(pose.x, pose.y):
        pose = world.random_pose(rng)
    goal = pick_goal(world, pose, rng)
    poses = [pose.as_array()]
    for _ in range(length - 1):
        if math.hypot(goal.x - pose.x, goal.y - pose.y) < goal_tolerance:
            goal = pick_goal(world, pose, rng)
        action = expert_policy(world, pose, goal, noise_level, rng, fps=fps)
        pose = step_pose(world, pose, action, world.average_step_size)
        poses.append(pose.as_array())
    return np.array(poses)


def render_poses(world: WorldMap, poses, resolution=(32, 32)) -> np.ndarray:
    return np.stack([render(world, Pose.from_array(p), resolution) for p in poses])
