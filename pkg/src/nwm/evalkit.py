"""Trajectory metrics (ATE, RPE), PSNR, evaluation-set selection, and CSV/SVG reports."""
from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .io import write_text
from .world import wrap_angle

PSNR_CAP = 99.0


def _pair(est, ref) -> tuple[np.ndarray, np.ndarray]:
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"trajectory shapes differ: {est.shape} vs {ref.shape}")
    if est.ndim != 2 or est.shape[1] < 2 or len(est) < 2:
        raise ValueError("trajectories must be (L>=2, 2 or 3) arrays")
    return est, ref


def ate(est, ref) -> float:
    """Root-mean-square position error over time-aligned poses; no alignment transform."""
    est, ref = _pair(est, ref)
    return float(np.sqrt(np.mean(np.sum((est[:, :2] - ref[:, :2]) ** 2, axis=1))))


def relative_motion(poses: np.ndarray, delta: int) -> np.ndarray:
    """Pose i+delta expressed in the frame of pose i, as rows (dx, dy, dyaw)."""
    a, b = poses[:-delta], poses[delta:]
    c, s = np.cos(a[:, 2]), np.sin(a[:, 2])
    dx, dy = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    return np.column_stack([c * dx + s * dy, -s * dx + c * dy, wrap_angle(b[:, 2] - a[:, 2])])


def rpe(est, ref, delta: int = 1) -> tuple[float, float]:
    """(translation RMS, rotation RMS) of the error between relative motions over ``delta`` steps."""
    est, ref = _pair(est, ref)
    if est.shape[1] != 3:
        raise ValueError("relative pose error needs (x, y, yaw) poses")
    if not 1 <= delta < len(est):
        raise ValueError(f"delta must be in [1, {len(est) - 1}]")
    re, rr = relative_motion(est, delta), relative_motion(ref, delta)
    # error transform = inverse(ref motion) composed with est motion
    c, s = np.cos(rr[:, 2]), np.sin(rr[:, 2])
    dx, dy = re[:, 0] - rr[:, 0], re[:, 1] - rr[:, 1]
    ex, ey = c * dx + s * dy, -s * dx + c * dy
    eyaw = wrap_angle(re[:, 2] - rr[:, 2])
    return float(np.sqrt(np.mean(ex ** 2 + ey ** 2))), float(np.sqrt(np.mean(eyaw ** 2)))


def psnr(a, b, max_value: float = 1.0) -> float:
    """10 log10(max^2 / MSE) in dB; identical inputs return ``PSNR_CAP``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_value ** 2 / err))


# --- evaluation set ----------------------------------------------------------

def constant_forward(poses) -> np.ndarray:
    """Straight-line prediction from the first pose at the episode's mean speed."""
    poses = np.asarray(poses, dtype=np.float64)
    speed = np.mean(np.linalg.norm(np.diff(poses[:, :2], axis=0), axis=1))
    x0, y0, yaw = poses[0]
    k = np.arange(len(poses))
    return np.column_stack([x0 + k * speed * math.cos(yaw), y0 + k * speed * math.sin(yaw), np.full(len(k), yaw)])


def forward_residual(poses) -> float:
    return ate(constant_forward(poses), poses)


def build_eval_set(trajectories, count: int) -> list[int]:
    """Ids of the ``count`` episodes a constant-forward predictor explains worst.

    ``trajectories`` maps id -> poses, is a sequence of pose arrays (ids are
    positions), or is a :class:`nwm.dataset.Dataset`. Ties go to the lower id.
    """
    if hasattr(trajectories, "entries"):
        ds = trajectories
        trajectories = {e["id"]: np.fromfile(ds.path / e["pose_file"], dtype="<f8").reshape(-1, 3)
                        for e in ds.entries}
    elif not isinstance(trajectories, Mapping):
        trajectories = dict(enumerate(trajectories))
    if not 0 < count <= len(trajectories):
        raise ValueError(f"count {count} must be in [1, {len(trajectories)}]")
    # rounding makes float noise count as a tie, which the id then breaks
    scored = sorted(trajectories, key=lambda i: (-round(forward_residual(trajectories[i]), 9), i))
    return scored[:count]


# --- reports -----------------------------------------------------------------

def summarize(results: Mapping[str, Sequence[float]]) -> list[dict]:
    """Mean and population standard deviation per named result series."""
    rows = []
    for name, values in results.items():
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            raise ValueError(f"result {name!r} is empty")
        rows.append({"name": name, "n": int(v.size), "mean": float(v.mean()), "std": float(v.std())})
    return rows


def to_csv(rows: list[dict], config_hash: str | None = None) -> str:
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    """Parse a report CSV back, converting numeric fields; ``#`` comment lines are skipped."""
    out = []
    lines = [line for line in text.splitlines(keepends=True) if not line.startswith("#")]
    for r in csv.DictReader(lines):
        out.append({k: _number(v) for k, v in r.items()})
    return out


def _number(v: str):
    try:
        return int(v)
    except ValueError:
        try:
            return float(v)
        except ValueError:
            return v


def svg_bar_chart(rows: list[dict], title: str = "", width: int = 480, height: int = 300) -> str:
    """Bars of ``mean`` with whiskers of one ``std``."""
    pad, n = 40, len(rows)
    top = max(r["mean"] + r["std"] for r in rows) or 1.0
    scale = (height - 2 * pad) / top
    bw = (width - 2 * pad) / max(n, 1)
    parts = [_svg_head(width, height, title)]
    for i, r in enumerate(rows):
        x = pad + i * bw + bw * 0.15
        h = r["mean"] * scale
        y = height - pad - h
        cx = x + bw * 0.35
        parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{bw * 0.7:.1f}" height="{h:.1f}" fill="#4a7bb7"/>')
        lo, hi = height - pad - (r["mean"] - r["std"]) * scale, height - pad - (r["mean"] + r["std"]) * scale
        parts.append(f'<line x1="{cx:.1f}" y1="{lo:.1f}" x2="{cx:.1f}" y2="{hi:.1f}" stroke="black"/>')
        parts.append(f'<text x="{cx:.1f}" y="{height - pad + 14}" font-size="10" text-anchor="middle">'
                     f'{_escape(str(r["name"]))}</text>')
        parts.append(f'<text x="{cx:.1f}" y="{y - 4:.1f}" font-size="9" text-anchor="middle">{r["mean"]:.3g}</text>')
    parts.append("</svg>\n")
    return "\n".join(parts)


def svg_line_chart(series: Mapping[str, tuple[Sequence[float], Sequence[float]]], title: str = "",
                   width: int = 480, height: int = 300) -> str:
    """One polyline per named (xs, ys) series on shared axes."""
    pad = 40
    xs = np.concatenate([np.asarray(v[0], dtype=float) for v in series.values()])
    ys = np.concatenate([np.asarray(v[1], dtype=float) for v in series.values()])
    x0, x1 = xs.min(), xs.max() if xs.max() > xs.min() else xs.min() + 1
    y0, y1 = ys.min(), ys.max() if ys.max() > ys.min() else ys.min() + 1
    sx = lambda x: pad + (x - x0) / (x1 - x0) * (width - 2 * pad)
    sy = lambda y: height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)
    colors = ["#4a7bb7", "#d9534f", "#5cb85c", "#f0ad4e", "#777777"]
    parts = [_svg_head(width, height, title)]
    for i, (name, (x, y)) in enumerate(series.items()):
        pts = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(x, y))
        col = colors[i % len(colors)]
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="2"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 12 * i}" font-size="10" fill="{col}" '
                     f'text-anchor="end">{_escape(name)}</text>')
    parts.append(f'<text x="{pad}" y="{height - 8}" font-size="9">{x0:.3g}</text>')
    parts.append(f'<text x="{width - pad}" y="{height - 8}" font-size="9" text-anchor="end">{x1:.3g}</text>')
    parts.append(f'<text x="4" y="{sy(y1):.1f}" font-size="9">{y1:.3g}</text>')
    parts.append(f'<text x="4" y="{sy(y0):.1f}" font-size="9">{y0:.3g}</text>')
    parts.append("</svg>\n")
    return "\n".join(parts)


def _svg_head(width: int, height: int, title: str) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n<rect width="100%" height="100%" fill="white"/>\n'
            f'<text x="{width / 2}" y="16" font-size="12" text-anchor="middle">{_escape(title)}</text>')


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def report(results: Mapping[str, Sequence[float]], out_path, title: str = "",
           curves: Mapping[str, tuple[Sequence[float], Sequence[float]]] | None = None,
           config_hash: str | None = None) -> list[dict]:
    """Write ``<out>.csv`` (name,n,mean,std) and ``<out>.svg``; curves, if given, become the chart."""
    if not results:
        raise ValueError("no results to report")
    out = Path(out_path)
    rows = summarize(results)
    write_text(out.with_suffix(".csv"), to_csv(rows, config_hash))
    svg = svg_line_chart(curves, title) if curves else svg_bar_chart(rows, title)
    write_text(out.with_suffix(".svg"), svg)
    return rows
