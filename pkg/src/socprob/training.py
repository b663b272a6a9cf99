"""Teacher-forced L2 map regression, Adam updates and checkpoint files."""
from __future__ import annotations

import io
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .convlstm import DEFAULT_CHANNELS, StackParams, forward_sequence, init_stack, stack_backward
from .errors import (CheckpointFormatError, CheckpointTruncatedError, CheckpointVersionError, ConfigError,
                     DimensionError, NumericError)
from .prob_map import GridSpec, ProbMap, encode_positions, fit_grid
from .tensor_core import AdamState, adam_step, clip_by_global_norm, global_norm
from .trajectory_data import PredictionSample, Scene, build_samples

log = logging.getLogger(__name__)

MAGIC = b"SPRB"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    width: int = 100
    height: int = 100
    sigma_target: float = 0.1
    sigma_other: float = 0.3
    obs_len: int = 8
    pred_len: int = 12
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    integrate_neighbors: bool = True
    clip_norm: float = 5.0
    channels: tuple = DEFAULT_CHANNELS
    kernel: int = 3
    margin_frac: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float32"
    augment: bool = False
    head_bias: float = 0.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        for name in ("width", "height", "obs_len", "pred_len", "batch_size", "kernel"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if self.kernel % 2 != 1:
            raise ConfigError("kernel must be odd")
        if not self.channels:
            raise ConfigError("need at least one ConvLSTM layer")
        if self.sigma_target <= 0 or self.sigma_other <= 0:
            raise ConfigError("sigmas must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(map(str, v))
            elif isinstance(v, bool):
                v = "true" if v else "false"
            else:
                v = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Build from string or typed values, overriding ``base`` (defaults if None)."""
        current = asdict(base or cls())
        types = {f.name: f.type for f in fields(cls)}
        for k, v in values.items():
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            current[k] = _coerce(k, v, type(current[k]))
        return cls(**current)

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        return cls.from_mapping(parse_key_values(text), base)


def _coerce(key, value, kind):
    if not isinstance(value, str):
        return tuple(value) if kind is tuple else value
    s = value.strip()
    try:
        if kind is bool:
            if s.lower() in ("1", "true", "yes", "on"):
                return True
            if s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if kind is int:
            return int(s)
        if kind is float:
            return float(s)
        if kind is tuple:
            return tuple(int(p) for p in s.replace("x", ",").split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {key}") from None
    return s


def parse_key_values(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n} is not key=value: {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def l2_loss(pred: ProbMap, truth: ProbMap) -> float:
    """Mean over cells of the squared difference."""
    if pred.spec != truth.spec or pred.grid.shape != truth.grid.shape:
        raise DimensionError("prediction and ground truth maps use different grids")
    d = pred.grid.astype(np.float64) - truth.grid.astype(np.float64)
    return float(np.mean(d * d))


def _sigmas(positions, target_id, cfg: TrainConfig, integrate: bool):
    sig = {}
    if integrate:
        sig = {pid: cfg.sigma_other for pid in positions}
    if target_id in positions:
        sig[target_id] = cfg.sigma_target
    return sig


def training_arrays(sample: PredictionSample, cfg: TrainConfig, spec: GridSpec, dtype=None):
    """Input maps for window steps 1..T-1 and target maps for steps obs_len+1..T.

    Shapes are ``(T-1, 1, H, W)`` and ``(pred_len, 1, H, W)``.
    """
    dtype = dtype or cfg.np_dtype
    total = sample.obs_len + sample.pred_len
    inputs = np.empty((total - 1, 1, spec.height, spec.width), dtype=dtype)
    for t in range(total - 1):
        pos = sample.positions_at_step(t)
        inputs[t, 0] = encode_positions(pos, _sigmas(pos, sample.target_id, cfg, cfg.integrate_neighbors), spec, dtype)
    targets = np.empty((sample.pred_len, 1, spec.height, spec.width), dtype=dtype)
    for j, p in enumerate(sample.future):
        targets[j, 0] = encode_positions({0: p}, {0: cfg.sigma_target}, spec, dtype)
    return inputs, targets


def make_training_pair(sample: PredictionSample, cfg: TrainConfig, spec: GridSpec):
    """(19 input ProbMaps, 12 target ProbMaps) for the default 8/12 split."""
    inputs, targets = training_arrays(sample, cfg, spec, np.float64)
    return [ProbMap(m, spec) for m in inputs], [ProbMap(m, spec) for m in targets]


def sample_groups(scenes, cfg: TrainConfig, max_samples: int | None = None, stride: int = 1):
    """One (GridSpec, samples) group per non-empty scene, each scene fitting its own grid."""
    groups = []
    for sc in scenes:
        if not sc.trajectories:
            continue
        samples = build_samples(sc, cfg.obs_len, cfg.pred_len, stride)
        if not samples:
            continue
        groups.append((fit_grid(sc, cfg.width, cfg.height, cfg.margin_frac), samples))
    if max_samples is not None:
        groups = _subsample(groups, max_samples, cfg.seed)
    return groups


def _subsample(groups, max_samples, seed):
    total = sum(len(s) for _, s in groups)
    if total <= max_samples:
        return groups
    rng = np.random.default_rng([seed, 7919])
    keep = np.sort(rng.choice(total, size=max_samples, replace=False))
    out, offset = [], 0
    for spec, samples in groups:
        idx = keep[(keep >= offset) & (keep < offset + len(samples))] - offset
        if len(idx):
            out.append((spec, [samples[i] for i in idx]))
        offset += len(samples)
    return out


def _flip_sample(sample: PredictionSample, spec: GridSpec, sign) -> PredictionSample:
    x0, x1, y0, y1 = spec.extent
    c = np.array([(x0 + x1) / 2, (y0 + y1) / 2])
    f = lambda a: c + sign * (a - c)
    return PredictionSample(sample.target_id, f(sample.observed), f(sample.future),
                            {k: f(v) for k, v in sample.neighbor_observed.items()},
                            {k: f(v) for k, v in sample.neighbor_future.items()},
                            sample.anchor_frame, sample.scene_name)


@dataclass
class Checkpoint:
    config: TrainConfig
    params: StackParams
    adam: dict
    epoch: int = 0
    seed: int = 0
    version: int = FORMAT_VERSION
    loss_log: list = field(default_factory=list)


def batch_loss_and_grad(params: StackParams, xs: np.ndarray, targets: np.ndarray, obs_len: int):
    """Loss (sum over prediction steps of per-cell MSE, averaged over the batch) and its gradients.

    ``xs``: (T-1, N, 1, H, W); ``targets``: (pred_len, N, 1, H, W).
    """
    ys, _, tape = forward_sequence(xs, params, keep_tape=True)
    pred = ys[obs_len - 1:]
    diff = pred - targets
    n = xs.shape[1]
    cells = xs.shape[-1] * xs.shape[-2]
    loss = float(np.sum(np.square(diff, dtype=np.float64)) / (cells * n))
    dys = np.zeros_like(ys)
    dys[obs_len - 1:] = diff * (2.0 / (cells * n))
    return loss, stack_backward(tape, dys, params)


class _Encoder:
    """Caches encoded arrays when they fit in ``budget_bytes``."""

    def __init__(self, groups, cfg: TrainConfig, budget_bytes: float = 1.5e9):
        self.groups = groups
        self.cfg = cfg
        size = sum(len(s) * (cfg.obs_len * 2 + cfg.pred_len * 2) * spec.width * spec.height
                   * cfg.np_dtype.itemsize for spec, s in groups)
        self.cache = {} if (size <= budget_bytes and not cfg.augment) else None

    def get(self, gi, si, rng=None):
        spec, samples = self.groups[gi]
        if self.cache is not None and (gi, si) in self.cache:
            return self.cache[gi, si]
        sample = samples[si]
        if self.cfg.augment and rng is not None:
            sample = _flip_sample(sample, spec, np.where(rng.random(2) < 0.5, -1.0, 1.0))
        arrs = training_arrays(sample, self.cfg, spec)
        if self.cache is not None:
            self.cache[gi, si] = arrs
        return arrs


def train(groups, cfg: TrainConfig, resume: Checkpoint | None = None, progress=None):
    """Train on ``groups`` of (GridSpec, samples); returns a :class:`Checkpoint`.

    ``checkpoint.loss_log`` holds ``(epoch, mean_loss)`` per epoch (1-based).
    ``progress`` is called with ``(epoch, mean_loss)`` after each epoch.
    """
    groups = [(spec, list(s)) for spec, s in groups if len(s)]
    if not groups:
        raise ConfigError("no training samples")
    for spec, _ in groups:
        if (spec.height, spec.width) != (cfg.height, cfg.width):
            raise DimensionError(f"group grid {spec.shape} does not match config {cfg.height}x{cfg.width}")
    dtype = cfg.np_dtype
    if resume is None:
        params = init_stack(cfg.channels, cfg.height, cfg.width, cfg.seed, kernel=cfg.kernel, dtype=dtype,
                            head_bias=cfg.head_bias)
        adam = {k: AdamState.zeros_like(v) for k, v in params.named().items()}
        start, loss_log = 0, []
    else:
        params = resume.params.astype(dtype)
        adam = resume.adam
        start, loss_log = resume.epoch, list(resume.loss_log)

    encoder = _Encoder(groups, cfg)
    for epoch in range(start, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        batches = []
        for gi, (_, samples) in enumerate(groups):
            perm = rng.permutation(len(samples))
            batches.extend((gi, perm[i:i + cfg.batch_size]) for i in range(0, len(perm), cfg.batch_size))
        order = rng.permutation(len(batches))
        total, count = 0.0, 0
        for bi in order:
            gi, idx = batches[bi]
            pairs = [encoder.get(gi, int(si), rng) for si in idx]
            xs = np.stack([p[0] for p in pairs], axis=1)
            ts = np.stack([p[1] for p in pairs], axis=1)
            loss, grads = batch_loss_and_grad(params, xs, ts, cfg.obs_len)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                norms = {k: round(float(np.linalg.norm(v)), 4) for k, v in params.named().items()}
                raise NumericError(f"non-finite loss/gradient at epoch {epoch + 1}, batch {bi}: "
                                   f"loss={loss}, parameter norms={norms}")
            grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
            new = {}
            for name, p in params.named().items():
                new[name], adam[name] = adam_step(p, grads[name].astype(dtype, copy=False), adam[name],
                                                  cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, name)
            params = params.with_tensors(new)
            total += loss * len(idx)
            count += len(idx)
        mean_loss = total / count
        loss_log.append((epoch + 1, mean_loss))
        log.info("epoch %d mean_loss %.6g", epoch + 1, mean_loss)
        if progress is not None:
            progress(epoch + 1, mean_loss)
    return Checkpoint(cfg, params, adam, epoch=max(cfg.epochs, start), seed=cfg.seed, loss_log=loss_log)


def write_loss_log(path, loss_log) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,mean_loss\n")
        for epoch, loss in loss_log:
            fh.write(f"{epoch},{loss:.10g}\n")


# checkpoint file:
#   "SPRB" | u32 version | u32 header_len | header (utf-8 key=value lines)
#   then per tensor: u32 ndim | u32 dims... | float32 LE data
# tensor order: parameters (declared order), Adam first moments, Adam second moments


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    names = list(ckpt.params.named())
    steps = {s.step_count for s in ckpt.adam.values()}
    header = ckpt.config.to_text()
    header += f"epoch={ckpt.epoch}\nrng_seed={ckpt.seed}\nadam_step={max(steps) if steps else 0}\n"
    header += "tensors=" + ",".join(names) + "\n"
    header += "loss_log=" + ";".join(f"{e}:{l!r}" for e, l in ckpt.loss_log) + "\n"
    hb = header.encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(hb)))
    buf.write(hb)
    tensors = list(ckpt.params.named().values())
    tensors += [ckpt.adam[n].first_moment for n in names]
    tensors += [ckpt.adam[n].second_moment for n in names]
    for t in tensors:
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, expect: TrainConfig | None = None) -> Checkpoint:
    """Read a checkpoint. With ``expect``, the grid and layer layout must match it."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data)
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    header = r.take(r.u32()).decode("utf-8")
    kv = parse_key_values(header)
    meta = {k: kv.pop(k) for k in ("epoch", "rng_seed", "adam_step", "tensors", "loss_log") if k in kv}
    cfg = TrainConfig.from_mapping(kv)
    if expect is not None:
        if (cfg.height, cfg.width) != (expect.height, expect.width):
            raise DimensionError(f"checkpoint grid {cfg.height}x{cfg.width} does not match "
                                 f"configured {expect.height}x{expect.width}")
        if cfg.channels != expect.channels or cfg.kernel != expect.kernel:
            raise DimensionError(f"checkpoint layers {cfg.channels}/k{cfg.kernel} do not match "
                                 f"configured {expect.channels}/k{expect.kernel}")
    template = init_stack(cfg.channels, cfg.height, cfg.width, 0, kernel=cfg.kernel, dtype=np.float32)
    names = meta.get("tensors", "").split(",")
    expected_names = list(template.named())
    if names != expected_names:
        raise CheckpointFormatError(f"{path}: tensor list does not match the configured layout")

    def read_tensor(expected_shape):
        nd = r.u32()
        shape = struct.unpack(f"<{nd}I", r.take(4 * nd)) if nd else ()
        if tuple(shape) != tuple(expected_shape):
            raise DimensionError(f"{path}: tensor shape {shape} != expected {expected_shape}")
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)

    shapes = {k: v.shape for k, v in template.named().items()}
    tensors = {n: read_tensor(shapes[n]) for n in names}
    m1 = {n: read_tensor(shapes[n]) for n in names}
    m2 = {n: read_tensor(shapes[n]) for n in names}
    if r.pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    step = int(meta.get("adam_step", 0))
    adam = {n: AdamState(m1[n], m2[n], step) for n in names}
    loss_log = []
    for item in filter(None, meta.get("loss_log", "").split(";")):
        e, l = item.split(":")
        loss_log.append((int(e), float(l)))
    return Checkpoint(cfg, template.with_tensors(tensors), adam, epoch=int(meta.get("epoch", 0)),
                      seed=int(meta.get("rng_seed", cfg.seed)), version=version, loss_log=loss_log)


def params_norms(params: StackParams) -> dict:
    return {k: float(global_norm([v])) for k, v in params.named().items()}
