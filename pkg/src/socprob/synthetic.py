"""Deterministic synthetic crowds in the ETH/UCY annotation format.

Walkers enter from a random edge of a rectangular plaza, head for the
opposite side at a preferred speed, drift slightly and are observed every
0.4 s. Used by the test-suite and demos when the real benchmark files are
not at hand; not a substitute for them.

Run ``python -m socprob.synthetic OUT_DIR`` to write the five benchmark-named
files.
"""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from .trajectory_data import BENCHMARK_SCENES, Scene, Trajectory, parse_dataset, serialize_scene


def make_scene(name: str = "synthetic", n_peds: int = 30, n_frames: int = 120, size=(15.0, 12.0),
               speed=(0.9, 1.6), noise: float = 0.03, seed: int = 0, frame_stride: int = 10) -> Scene:
    rng = np.random.default_rng(seed)
    w, h = size
    dt = 0.4
    trajs = []
    for pid in range(1, n_peds + 1):
        edge = rng.integers(4)
        if edge == 0:
            start, goal = (0.0, rng.uniform(0, h)), (w, rng.uniform(0, h))
        elif edge == 1:
            start, goal = (w, rng.uniform(0, h)), (0.0, rng.uniform(0, h))
        elif edge == 2:
            start, goal = (rng.uniform(0, w), 0.0), (rng.uniform(0, w), h)
        else:
            start, goal = (rng.uniform(0, w), h), (rng.uniform(0, w), 0.0)
        pos = np.array(start, dtype=float)
        goal = np.array(goal, dtype=float)
        v_pref = rng.uniform(*speed)
        heading_noise = rng.normal(0, 0.05)
        t0 = int(rng.integers(0, max(1, n_frames - 25)))
        pts = []
        for t in range(t0, n_frames):
            pts.append((t, pos[0], pos[1]))
            d = goal - pos
            dist = np.linalg.norm(d)
            if dist < v_pref * dt:
                break
            ang = np.arctan2(d[1], d[0]) + heading_noise
            pos = pos + v_pref * dt * np.array([np.cos(ang), np.sin(ang)]) + rng.normal(0, noise, 2)
        if len(pts) >= 2:
            arr = np.array(pts)
            trajs.append(Trajectory(pid, arr[:, 0].astype(np.int64), np.round(arr[:, 1:], 6)))
    return Scene(name, trajs, 0.4, 0, frame_stride)


def write_benchmark(out_dir, n_peds: int = 30, n_frames: int = 120, seed: int = 0) -> list[Path]:
    """Write ``<name>.txt`` for each benchmark scene name; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, name in enumerate(BENCHMARK_SCENES):
        sc = make_scene(name, n_peds=n_peds, n_frames=n_frames, seed=seed + i)
        p = out_dir / f"{name}.txt"
        p.write_text(serialize_scene(sc))
        paths.append(p)
    return paths


def reload(scene: Scene) -> Scene:
    """Round-trip through the text format, as a file on disk would be read."""
    return parse_dataset(serialize_scene(scene), name=scene.name, frame_stride=scene.frame_stride)


if __name__ == "__main__":
    if len(sys.argv) != 2:
        print("usage: python -m socprob.synthetic OUT_DIR", file=sys.stderr)
        sys.exit(1)
    for p in write_benchmark(sys.argv[1]):
        print(p)
