"""Displacement metrics, autoregressive rollout and the benchmark protocol."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .convlstm import StackParams, forward_sequence, stack_step
from .errors import ConfigError, DecodeError, DimensionError
from .prob_map import (GridSpec, ProbMap, argmax_decode, encode_positions, fit_grid, sample_cells,
                       sample_coordinate)
from .trajectory_data import BENCHMARK_SCENES, PredictionSample, Scene, build_samples, leave_one_out

log = logging.getLogger(__name__)


def _check_pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction shape {pred.shape} != ground truth shape {truth.shape}")
    if pred.ndim == 2:
        pred, truth = pred[None], truth[None]
    if pred.ndim != 3 or pred.shape[-1] != 2 or pred.shape[1] < 1:
        raise DimensionError("expected (pedestrians, steps, 2) trajectories")
    return pred, truth


def ade(pred, truth) -> float:
    """Mean Euclidean error over all pedestrians and prediction steps."""
    pred, truth = _check_pair(pred, truth)
    return float(np.mean(np.linalg.norm(pred - truth, axis=-1)))


def fde(pred, truth) -> float:
    """Mean Euclidean error at the final prediction step."""
    pred, truth = _check_pair(pred, truth)
    return float(np.mean(np.linalg.norm(pred[:, -1] - truth[:, -1], axis=-1)))


def linear_baseline(observed, pred_len: int = 12) -> np.ndarray:
    """Per-axis least-squares line through the observed steps, extrapolated ``pred_len`` steps."""
    obs = np.asarray(observed, dtype=np.float64)
    n = len(obs)
    if n < 2:
        raise ValueError("linear baseline needs at least two observed points")
    t = np.arange(n, dtype=np.float64)
    tc = t - t.mean()
    slope = (tc @ (obs - obs.mean(axis=0))) / (tc @ tc)
    intercept = obs.mean(axis=0) - slope * t.mean()
    tf = np.arange(n, n + pred_len, dtype=np.float64)
    return intercept + tf[:, None] * slope


def stationary_baseline(observed, pred_len: int = 12) -> np.ndarray:
    return np.repeat(np.asarray(observed, dtype=np.float64)[-1:], pred_len, axis=0)


@dataclass
class MetricReport:
    dataset: str
    ade: float
    fde: float
    num_pedestrians: int
    num_samples_k: int
    seed: int
    min_fde: float | None = None


@dataclass
class SampleScore:
    ade: float      # min over candidates of the target ADE
    fde: float      # FDE of that same candidate
    min_fde: float  # min over candidates of the target FDE
    best_index: int


def score_candidates(candidates, truth) -> SampleScore:
    """Best-of-k scoring: candidate with the lowest ADE wins; min-FDE reported alongside."""
    cand = np.asarray(candidates, dtype=np.float64)
    if cand.ndim == 2:
        cand = cand[None]
    truth = np.asarray(truth, dtype=np.float64)
    if cand.shape[1:] != truth.shape:
        raise DimensionError(f"candidates {cand.shape} do not match truth {truth.shape}")
    d = np.linalg.norm(cand - truth[None], axis=-1)
    ades = d.mean(axis=1)
    best = int(np.argmin(ades))
    return SampleScore(float(ades[best]), float(d[best, -1]), float(d[:, -1].min()), best)


# ---------------------------------------------------------------- rollout

Decoder = Callable[[ProbMap, int, int, int], np.ndarray]


@dataclass
class Rollout:
    ped_ids: list          # target first
    predictions: np.ndarray  # (k, len(ped_ids), pred_len, 2)

    def target(self) -> np.ndarray:
        return self.predictions[:, 0]


def _decode_cell(values: np.ndarray, spec: GridSpec, mode: str, rng) -> np.ndarray:
    pmap = ProbMap(values[None], spec)
    return argmax_decode(pmap) if mode == "argmax" else sample_coordinate(pmap, rng)


def rollout(params: StackParams, sample: PredictionSample, cfg, spec: GridSpec, decode: str = "sample",
            rng: np.random.Generator | None = None, k: int = 1, joint: bool = True,
            decoder: Decoder | None = None) -> Rollout:
    """Warm up on the observed window, then predict ``pred_len`` steps autoregressively.

    Every pedestrian present at the last observed step gets its own recurrent
    state (shared weights) and is advanced together with the others. With
    ``joint=True`` each next input map re-encodes everyone's decoded
    positions; with ``joint=False`` neighbors stay frozen at their last
    observed positions. Neighbors that left during observation persist at
    their last observed position. ``k`` independent rollouts share one
    warm-up. ``decoder(map, ped_id, step, replicate)`` overrides decoding.
    """
    if decode not in ("sample", "argmax"):
        raise ConfigError(f"unknown decode mode {decode!r}")
    if (spec.height, spec.width) != tuple(params.spatial):
        raise DimensionError(f"model grid {tuple(params.spatial)} does not match {spec.shape}")
    rng = rng if rng is not None else np.random.default_rng(0)
    dtype = params.dtype
    obs_len, pred_len = sample.obs_len, sample.pred_len
    integrate = cfg.integrate_neighbors
    last = obs_len - 1

    last_seen = {sample.target_id: sample.observed[-1]}
    for pid, arr in sample.neighbor_observed.items():
        present = np.flatnonzero(~np.isnan(arr[:, 0]))
        if len(present):
            last_seen[pid] = arr[present[-1]]
    ids = [sample.target_id] + [pid for pid in sample.neighbor_ids()
                                if pid in sample.neighbor_observed
                                and not np.isnan(sample.neighbor_observed[pid][last, 0])]
    persisted = {pid: p for pid, p in last_seen.items() if pid not in ids}
    n = len(ids)

    def sigmas_for(target, present):
        sig = {pid: cfg.sigma_other for pid in present} if integrate else {}
        if target in present:
            sig[target] = cfg.sigma_target
        return sig

    warm = np.empty((obs_len, n, 1, spec.height, spec.width), dtype=dtype)
    for t in range(obs_len):
        pos = sample.positions_at_step(t)
        for j, pid in enumerate(ids):
            warm[t, j, 0] = encode_positions(pos, sigmas_for(pid, pos), spec, dtype)
    ys, states, _ = forward_sequence(warm, params)
    y = np.tile(ys[-1], (k, 1, 1, 1))  # replicate-major: row r*n + j
    states = [type(s)(np.tile(s.h, (k, 1, 1, 1)), np.tile(s.c, (k, 1, 1, 1))) for s in states]

    prev = np.tile(np.stack([last_seen[pid] for pid in ids])[None], (k, 1, 1))
    preds = np.empty((k, n, pred_len, 2))
    for step in range(pred_len):
        cur = np.empty((k, n, 2))
        for r in range(k):
            for j, pid in enumerate(ids):
                vals = y[r * n + j, 0]
                if decoder is not None:
                    p = np.asarray(decoder(ProbMap(vals[None], spec), pid, step, r), dtype=np.float64)
                else:
                    try:
                        p = _decode_cell(vals, spec, decode, rng)
                    except DecodeError:
                        log.warning("empty map for pedestrian %s at step %d; holding position", pid, step)
                        p = prev[r, j]
                cur[r, j] = p
        preds[:, :, step] = cur
        prev = cur
        if step == pred_len - 1:
            break
        x = np.empty((k * n, 1, spec.height, spec.width), dtype=dtype)
        for r in range(k):
            for j, pid in enumerate(ids):
                if joint:
                    pos = {q: cur[r, i] for i, q in enumerate(ids)}
                else:
                    pos = {q: last_seen[q] for q in ids}
                    pos[pid] = cur[r, j]
                pos.update(persisted)
                x[r * n + j, 0] = encode_positions(pos, sigmas_for(pid, pos), spec, dtype)
        y, states = stack_step(x, params, states)
    return Rollout(ids, preds)


def best_of_k(params: StackParams, sample: PredictionSample, cfg, spec: GridSpec, k: int = 20,
              rng: np.random.Generator | None = None, joint: bool = True) -> SampleScore:
    if k < 1:
        raise ValueError("k must be >= 1")
    ro = rollout(params, sample, cfg, spec, "sample", rng, k=k, joint=joint)
    return score_candidates(ro.target(), sample.future)


# ------------------------------------------------------------- predictors

class LinearPredictor:
    name = "linear"
    k = 1

    def __call__(self, sample, spec, rng):
        return linear_baseline(sample.observed, sample.pred_len)[None]


class StationaryPredictor:
    name = "stationary"
    k = 1

    def __call__(self, sample, spec, rng):
        return stationary_baseline(sample.observed, sample.pred_len)[None]


class EchoPredictor:
    """Returns the ground truth; closes the protocol loop in tests."""
    name = "echo"
    k = 1

    def __call__(self, sample, spec, rng):
        return np.asarray(sample.future)[None]


class ModelPredictor:
    def __init__(self, params: StackParams, cfg, k: int = 20, decode: str = "sample", joint: bool = True):
        self.params, self.cfg, self.k, self.decode, self.joint = params, cfg, k, decode, joint
        self.name = "model"

    def __call__(self, sample, spec, rng):
        k = 1 if self.decode == "argmax" else self.k
        return rollout(self.params, sample, self.cfg, spec, self.decode, rng, k=k, joint=self.joint).target()


BASELINES = {"linear": LinearPredictor, "stationary": StationaryPredictor, "echo": EchoPredictor}


def evaluate_samples(predictor, groups, seed: int = 0, name: str = "") -> tuple[MetricReport, list]:
    """Best-of-k metrics over ``groups`` of (GridSpec, samples).

    Each sample draws from its own stream seeded by ``(seed, running index)``.
    """
    scores = []
    idx = 0
    for spec, samples in groups:
        for s in samples:
            rng = np.random.default_rng([seed, idx])
            scores.append(score_candidates(predictor(s, spec, rng), s.future))
            idx += 1
    if not scores:
        raise ConfigError(f"no evaluation samples for {name or 'dataset'}")
    rep = MetricReport(name, float(np.mean([s.ade for s in scores])), float(np.mean([s.fde for s in scores])),
                       len(scores), getattr(predictor, "k", 1), seed,
                       float(np.mean([s.min_fde for s in scores])))
    return rep, scores


def eval_groups(scenes: Sequence[Scene], cfg, max_samples: int | None = None, sample_stride: int = 1):
    from .training import sample_groups
    return sample_groups(scenes, cfg, max_samples=max_samples, stride=sample_stride)


def run_benchmark(scenes: Sequence[Scene], predictor_for, cfg, held_out: Sequence[str] | None = None,
                  seed: int = 0, max_samples: int | None = None, sample_stride: int = 1) -> list[MetricReport]:
    """Leave-one-out evaluation; one report per held-out scene plus an ``AVG`` row.

    ``predictor_for`` is a predictor (same for every split) or a callable
    ``(held_out_name, train_scenes) -> predictor``.
    """
    names = [n.lower() for n in held_out] if held_out else \
        [n for n in BENCHMARK_SCENES if n in {s.name.lower() for s in scenes}]
    if not names:
        raise ConfigError("no benchmark scenes to evaluate")
    reports = []
    for name in names:
        train_scenes, test_scenes = leave_one_out(scenes, name)
        if callable(predictor_for) and not hasattr(predictor_for, "k"):
            predictor = predictor_for(name, train_scenes)
        else:
            predictor = predictor_for
        groups = eval_groups(test_scenes, cfg, max_samples, sample_stride)
        rep, _ = evaluate_samples(predictor, groups, seed, name)
        reports.append(rep)
    if len(reports) > 1:
        reports.append(average_report(reports, seed))
    return reports


def average_report(reports: Sequence[MetricReport], seed: int = 0) -> MetricReport:
    """Unweighted mean of per-scene rows."""
    return MetricReport("AVG", float(np.mean([r.ade for r in reports])), float(np.mean([r.fde for r in reports])),
                        int(sum(r.num_pedestrians for r in reports)), reports[0].num_samples_k, seed,
                        float(np.mean([r.min_fde for r in reports if r.min_fde is not None]))
                        if all(r.min_fde is not None for r in reports) else None)


# -------------------------------------------------------------- ablations

MAP_SIZES = (80, 100, 150, 200)


def sampling_error_sweep(scene: Scene, sizes=MAP_SIZES, k: int = 20, seed: int = 0, sigma: float = 0.1,
                         obs_len: int = 8, pred_len: int = 12, margin_frac: float = 0.05,
                         max_samples: int | None = None) -> list[dict]:
    """Decode ground-truth target maps (no model) at several grid sizes.

    For each size the scene gets its own grid; each future point of each
    sample is replaced by a draw from its own peak-normalized Gaussian map.
    Reports the mean per-point error and the best-of-k ADE/FDE.
    """
    samples = build_samples(scene, obs_len, pred_len)
    if max_samples is not None and len(samples) > max_samples:
        pick = np.sort(np.random.default_rng([seed, 104729]).choice(len(samples), max_samples, replace=False))
        samples = [samples[i] for i in pick]
    if not samples:
        raise ConfigError(f"scene {scene.name!r} yields no samples")
    rows = []
    for size in sizes:
        spec = fit_grid(scene, size, size, margin_frac)
        point_err, best_ade, best_fde = [], [], []
        for si, s in enumerate(samples):
            rng = np.random.default_rng([seed, si])
            cand = np.empty((k, pred_len, 2))
            for t, p in enumerate(s.future):
                vals = encode_positions({0: p}, {0: sigma}, spec)
                flat = sample_cells(vals, rng, size=k)
                rows_, cols = np.divmod(flat, spec.width)
                centers = np.stack([spec.origin[0] + (cols + 0.5) * spec.cell_size,
                                    spec.origin[1] + (rows_ + 0.5) * spec.cell_size], axis=1)
                cand[:, t] = centers + (rng.random((k, 2)) - 0.5) * spec.cell_size
            d = np.linalg.norm(cand - s.future[None], axis=-1)
            point_err.append(d.mean())
            sc = score_candidates(cand, s.future)
            best_ade.append(sc.ade)
            best_fde.append(sc.fde)
        rows.append({"size": size, "cell_size": spec.cell_size, "mean_point_error": float(np.mean(point_err)),
                     "best_of_k_ade": float(np.mean(best_ade)), "best_of_k_fde": float(np.mean(best_fde)),
                     "k": k, "num_samples": len(samples)})
    return rows


def ablation_sweep(kind: str, checkpoints: dict, scenes: Sequence[Scene], held_out: str, k: int = 20,
                   seed: int = 0, max_samples: int | None = None, decode: str = "sample") -> list[dict]:
    """Evaluate one checkpoint per configuration on ``held_out``.

    ``kind`` is ``map_size`` (keys are grid sizes) or ``integration``
    (keys are booleans: neighbors integrated or not).
    """
    from .training import load_checkpoint

    if kind not in ("map_size", "integration"):
        raise ConfigError(f"unknown ablation kind {kind!r}")
    if not checkpoints:
        raise ConfigError("no checkpoints given")
    rows = []
    for key, path in checkpoints.items():
        if path is None or not Path(path).is_file():
            raise ConfigError(f"missing checkpoint for {kind}={key}: {path}")
        ck = load_checkpoint(path)
        cfg = ck.config
        if kind == "map_size" and int(key) != cfg.width:
            raise ConfigError(f"checkpoint {path} has grid {cfg.width}, expected {key}")
        if kind == "integration" and bool(key) != cfg.integrate_neighbors:
            raise ConfigError(f"checkpoint {path} has integrate_neighbors={cfg.integrate_neighbors}")
        predictor = ModelPredictor(ck.params, cfg, k=k, decode=decode)
        _, test = leave_one_out(scenes, held_out)
        rep, _ = evaluate_samples(predictor, eval_groups(test, cfg, max_samples), seed, held_out)
        row = {"kind": kind, "grid": f"{cfg.width}x{cfg.height}", "integrate": cfg.integrate_neighbors}
        row.update(asdict(rep))
        rows.append(row)
    return rows


# ----------------------------------------------------------------- output

def write_metrics_csv(path, reports: Sequence[MetricReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene", "ade", "fde", "k", "seed"])
        for r in reports:
            w.writerow([r.dataset, f"{r.ade:.6f}", f"{r.fde:.6f}", r.num_samples_k, r.seed])


def write_rows_csv(path, rows: Sequence[dict]) -> None:
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def overlay_rows(sample: PredictionSample, predictions: np.ndarray, ped_id=None) -> list[tuple]:
    """Rows ``(ped_id, step, kind, x, y)`` with kind in obs/gt/pred; steps count from 0 at the first observation."""
    pid = sample.target_id if ped_id is None else ped_id
    rows = [(pid, t, "obs", *map(float, p)) for t, p in enumerate(sample.observed)]
    rows += [(pid, sample.obs_len + t, "gt", *map(float, p)) for t, p in enumerate(sample.future)]
    rows += [(pid, sample.obs_len + t, "pred", *map(float, p)) for t, p in enumerate(predictions)]
    return rows


def write_overlay_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ped_id", "step", "kind", "x", "y"])
        for pid, step, kind, x, y in rows:
            w.writerow([pid, step, kind, f"{x:.6f}", f"{y:.6f}"])
