"""ETH/UCY-style annotation ingest, windowing and leave-one-out splits.

Input rows are ``frame_id<TAB>ped_id<TAB>x<TAB>y`` in meters. Annotated
frames are spaced by a fixed stride (10 video frames in the public
exports); consecutive annotated frames become consecutive time steps of
``frame_interval_s`` seconds. A pedestrian whose annotations skip a
stride keeps one :class:`Trajectory` with a hole in ``frame_index``;
windows never straddle the hole.
"""
from __future__ import annotations

import io
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError

BENCHMARK_SCENES = ("eth", "hotel", "univ", "zara1", "zara2")
OBS_LEN = 8
PRED_LEN = 12
FRAME_INTERVAL_S = 0.4


@dataclass(frozen=True)
class Trajectory:
    pedestrian_id: int
    frames: np.ndarray  # (T,) int, strictly increasing time-step indices
    xy: np.ndarray      # (T, 2) float64 world meters

    def __post_init__(self):
        if len(self.frames) == 0:
            raise DataError(f"pedestrian {self.pedestrian_id} has no points")
        if np.any(np.diff(self.frames) <= 0):
            raise DataError(f"pedestrian {self.pedestrian_id}: frame indices not strictly increasing")

    @property
    def points(self):
        return [(int(f), float(x), float(y)) for f, (x, y) in zip(self.frames, self.xy)]

    def segments(self) -> list[tuple[int, int]]:
        """Half-open ``[start, stop)`` row ranges of gap-free runs."""
        breaks = np.flatnonzero(np.diff(self.frames) != 1) + 1
        starts = np.concatenate([[0], breaks])
        stops = np.concatenate([breaks, [len(self.frames)]])
        return list(zip(starts.tolist(), stops.tolist()))

    def position_at(self, frame: int):
        i = np.searchsorted(self.frames, frame)
        if i < len(self.frames) and self.frames[i] == frame:
            return self.xy[i]
        return None

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.pedestrian_id == other.pedestrian_id
                and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.xy, other.xy))

    __hash__ = None


@dataclass
class Scene:
    name: str
    trajectories: list[Trajectory] = field(default_factory=list)
    frame_interval_s: float = FRAME_INTERVAL_S
    frame_origin: int = 0   # raw frame id of time step 0
    frame_stride: int = 10  # raw frames per time step

    def __post_init__(self):
        ids = [t.pedestrian_id for t in self.trajectories]
        if len(ids) != len(set(ids)):
            raise DataError(f"scene {self.name!r}: duplicate pedestrian ids")
        self._by_id = {t.pedestrian_id: t for t in self.trajectories}

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.name == other.name and self.frame_interval_s == other.frame_interval_s
                and self.frame_origin == other.frame_origin and self.frame_stride == other.frame_stride
                and self.trajectories == other.trajectories)

    def trajectory(self, ped_id: int) -> Trajectory:
        return self._by_id[ped_id]

    def all_points(self) -> np.ndarray:
        if not self.trajectories:
            return np.zeros((0, 2))
        return np.concatenate([t.xy for t in self.trajectories])

    def positions_at(self, frame: int) -> dict[int, np.ndarray]:
        out = {}
        for t in self.trajectories:
            p = t.position_at(frame)
            if p is not None:
                out[t.pedestrian_id] = p
        return out


@dataclass(frozen=True)
class PredictionSample:
    """One target window. Neighbor arrays are NaN where the neighbor is absent."""
    target_id: int
    observed: np.ndarray   # (obs_len, 2)
    future: np.ndarray     # (pred_len, 2)
    neighbor_observed: dict
    neighbor_future: dict
    anchor_frame: int      # time-step index of the first observed point
    scene_name: str = ""

    @property
    def obs_len(self) -> int:
        return len(self.observed)

    @property
    def pred_len(self) -> int:
        return len(self.future)

    def neighbor_mask(self, ped_id: int, window: str = "observed") -> np.ndarray:
        table = self.neighbor_observed if window == "observed" else self.neighbor_future
        return ~np.isnan(table[ped_id][:, 0])

    def neighbor_ids(self) -> list[int]:
        return sorted(set(self.neighbor_observed) | set(self.neighbor_future))

    def positions_at_step(self, step: int) -> dict[int, np.ndarray]:
        """Everyone present at window step ``step`` (0-based over obs + pred)."""
        n_obs = self.obs_len
        if step < n_obs:
            out = {self.target_id: self.observed[step]}
            table, j = self.neighbor_observed, step
        else:
            out = {self.target_id: self.future[step - n_obs]}
            table, j = self.neighbor_future, step - n_obs
        for pid, arr in table.items():
            if not np.isnan(arr[j, 0]):
                out[pid] = arr[j]
        return out

    def target_path(self) -> np.ndarray:
        return np.concatenate([self.observed, self.future])


def _parse_int(token: str, what: str, line: int) -> int:
    try:
        v = float(token)
    except ValueError:
        raise ParseError(f"{what} {token!r} is not a number", line) from None
    if not np.isfinite(v) or v != int(v):
        raise ParseError(f"{what} {token!r} is not an integer", line)
    return int(v)


def _parse_float(token: str, what: str, line: int) -> float:
    try:
        v = float(token)
    except ValueError:
        raise ParseError(f"{what} {token!r} is not a number", line) from None
    if not np.isfinite(v):
        raise ParseError(f"{what} is not finite", line)
    return v


def infer_stride(rows_by_ped: dict[int, list]) -> int:
    gaps = Counter()
    for rows in rows_by_ped.values():
        fr = sorted(r[0] for r in rows)
        gaps.update(b - a for a, b in zip(fr, fr[1:]) if b > a)
    if not gaps:
        return 1
    # smallest among the most common gaps, so stray long gaps never win
    top = max(gaps.values())
    return min(g for g, c in gaps.items() if c == top)


def parse_dataset(source, format: str = "tsv", name: str = "", frame_stride: int | None = None,
                  frame_interval_s: float = FRAME_INTERVAL_S) -> Scene:
    """Parse annotation text (str, bytes or a binary/text stream) into a :class:`Scene`."""
    if format != "tsv":
        raise ConfigError(f"unsupported format {format!r}")
    if isinstance(source, (bytes, bytearray)):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        data = source.read()
        text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data

    rows_by_ped: dict[int, list] = {}
    seen = set()
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            # tolerate space-separated exports, but never a wrong field count
            fields = line.split()
        if len(fields) != 4:
            raise ParseError(f"expected 4 fields, got {len(fields)}", lineno)
        frame = _parse_int(fields[0], "frame_id", lineno)
        ped = _parse_int(fields[1], "ped_id", lineno)
        x = _parse_float(fields[2], "x", lineno)
        y = _parse_float(fields[3], "y", lineno)
        if (frame, ped) in seen:
            raise DataError(f"line {lineno}: duplicate row for frame {frame}, pedestrian {ped}")
        seen.add((frame, ped))
        rows_by_ped.setdefault(ped, []).append((frame, x, y))

    if not rows_by_ped:
        return Scene(name=name, trajectories=[], frame_interval_s=frame_interval_s,
                     frame_origin=0, frame_stride=frame_stride or 1)

    stride = frame_stride or infer_stride(rows_by_ped)
    origin = min(r[0] for rows in rows_by_ped.values() for r in rows)
    trajectories = []
    for ped in sorted(rows_by_ped):
        rows = sorted(rows_by_ped[ped])
        frames = np.array([r[0] for r in rows], dtype=np.int64) - origin
        if np.any(frames % stride):
            bad = rows[int(np.flatnonzero(frames % stride)[0])][0]
            raise DataError(f"pedestrian {ped}: frame {bad} is off the annotation stride {stride}")
        xy = np.array([(r[1], r[2]) for r in rows], dtype=np.float64)
        trajectories.append(Trajectory(ped, frames // stride, xy))
    return Scene(name=name, trajectories=trajectories, frame_interval_s=frame_interval_s,
                 frame_origin=origin, frame_stride=stride)


def serialize_scene(scene: Scene) -> str:
    rows = []
    for t in scene.trajectories:
        for f, (x, y) in zip(t.frames, t.xy):
            rows.append((int(f) * scene.frame_stride + scene.frame_origin, t.pedestrian_id, x, y))
    rows.sort(key=lambda r: (r[0], r[1]))
    return "".join(f"{f}\t{p}\t{x:.6f}\t{y:.6f}\n" for f, p, x, y in rows)


def load_scene(path, name: str | None = None, frame_stride: int | None = None) -> Scene:
    path = Path(path)
    with open(path, "rb") as fh:
        return parse_dataset(fh, name=name or path.stem, frame_stride=frame_stride)


def load_benchmark(data_dir, names: Iterable[str] = BENCHMARK_SCENES) -> list[Scene]:
    """Load every named sub-dataset found under ``data_dir``.

    A name maps either to ``<dir>/<name>.txt`` (or ``.tsv``) or to a
    directory ``<dir>/<name>/`` whose ``*.txt``/``*.tsv`` files each
    become a separate :class:`Scene` carrying that name.
    """
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise ConfigError(f"data directory {str(data_dir)!r} does not exist")
    scenes = []
    for name in names:
        key = name.lower()
        found = False
        for ext in (".txt", ".tsv"):
            p = data_dir / f"{key}{ext}"
            if p.is_file():
                scenes.append(load_scene(p, name=key))
                found = True
        sub = data_dir / key
        if sub.is_dir():
            for p in sorted(sub.rglob("*")):
                if p.suffix in (".txt", ".tsv") and p.is_file():
                    scenes.append(load_scene(p, name=key))
                    found = True
        if not found:
            raise ConfigError(f"scene {key!r} not found under {str(data_dir)!r}")
    return scenes


def default_data_dir():
    return os.environ.get("SOCPROB_DATA")


def build_samples(scene: Scene, obs_len: int = OBS_LEN, pred_len: int = PRED_LEN,
                  stride: int = 1) -> list[PredictionSample]:
    if obs_len < 1 or pred_len < 1 or stride < 1:
        raise ConfigError("obs_len, pred_len and stride must be >= 1")
    total = obs_len + pred_len
    samples = []
    for traj in scene.trajectories:
        for start, stop in traj.segments():
            for s in range(start, stop - total + 1, stride):
                f0 = int(traj.frames[s])
                frames = np.arange(f0, f0 + total)
                n_obs, n_fut = {}, {}
                for other in scene.trajectories:
                    if other.pedestrian_id == traj.pedestrian_id:
                        continue
                    if other.frames[-1] < f0 or other.frames[0] >= f0 + total:
                        continue
                    idx = np.searchsorted(other.frames, frames)
                    idx_c = np.minimum(idx, len(other.frames) - 1)
                    hit = other.frames[idx_c] == frames
                    if not hit.any():
                        continue
                    arr = np.full((total, 2), np.nan)
                    arr[hit] = other.xy[idx_c[hit]]
                    # both tables share keys; NaN rows mark absence
                    n_obs[other.pedestrian_id] = arr[:obs_len]
                    n_fut[other.pedestrian_id] = arr[obs_len:]
                samples.append(PredictionSample(
                    target_id=traj.pedestrian_id,
                    observed=traj.xy[s:s + obs_len].copy(),
                    future=traj.xy[s + obs_len:s + total].copy(),
                    neighbor_observed=n_obs,
                    neighbor_future=n_fut,
                    anchor_frame=f0,
                    scene_name=scene.name,
                ))
    return samples


def leave_one_out(scenes: Sequence[Scene], held_out: str) -> tuple[list[Scene], list[Scene]]:
    key = held_out.lower()
    names = {s.name.lower() for s in scenes}
    if key not in names:
        raise ConfigError(f"unknown held-out scene {held_out!r}; available: {sorted(names)}")
    test = [s for s in scenes if s.name.lower() == key]
    train = [s for s in scenes if s.name.lower() != key]
    return train, test


def flip_scene(scene: Scene, rng: np.random.Generator) -> Scene:
    """Random horizontal/vertical mirror about the scene's bounding-box center."""
    pts = scene.all_points()
    if len(pts) == 0:
        return scene
    center = (pts.min(axis=0) + pts.max(axis=0)) / 2.0
    sign = np.where(rng.random(2) < 0.5, -1.0, 1.0)
    trajs = [Trajectory(t.pedestrian_id, t.frames.copy(), center + sign * (t.xy - center))
             for t in scene.trajectories]
    return Scene(scene.name, trajs, scene.frame_interval_s, scene.frame_origin, scene.frame_stride)
