"""Command-line entry point: ``socprob <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data/format
error, 3 numeric failure. Progress goes to stderr; results go to stdout or
to ``--out``. Every file written under ``--out`` gets a
``<out>.manifest.json`` next to it.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (CheckpointFormatError, CheckpointTruncatedError, ConfigError, DataError, DecodeError,
                     DimensionError, NumericError, ParseError)
from .training import TrainConfig

log = logging.getLogger("socprob")

COMMANDS = ("ingest", "encode", "train", "predict", "eval", "baseline", "export", "gradcheck")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _grid(text: str):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 100x100, got {text!r}") from None


def _common(p: argparse.ArgumentParser):
    g = p.add_argument_group("common")
    g.add_argument("--data", help="benchmark directory (default: $SOCPROB_DATA)")
    g.add_argument("--held-out", help="scene left out of training / used for testing")
    g.add_argument("--grid", type=_grid, help="map size WxH")
    g.add_argument("--sigma-target", type=float)
    g.add_argument("--sigma-other", type=float)
    g.add_argument("--obs-len", type=int)
    g.add_argument("--pred-len", type=int)
    g.add_argument("--k", type=int, default=None, help="samples per prediction (default 20)")
    g.add_argument("--seed", type=int)
    g.add_argument("--no-integration", action="store_true", help="encode the target pedestrian only")
    g.add_argument("--checkpoint", help="checkpoint path; '{held_out}' is substituted per scene")
    g.add_argument("--out", help="output file")
    g.add_argument("--threads", type=int, help="cap on numeric worker threads")
    g.add_argument("--config", help="key=value file applied before command-line flags")
    g.add_argument("--max-samples", type=int, help="random subset size per split")
    g.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="socprob", description="probability-map trajectory prediction")
    parser.add_argument("--version", action="version", version=f"socprob {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("ingest", help="parse annotation files, report counts, optionally re-serialize")
    _common(p)
    p.add_argument("inputs", nargs="*", help="annotation files (default: the benchmark under --data)")
    p.add_argument("--frame-stride", type=int, help="raw frames per time step (default: inferred)")

    p = sub.add_parser("encode", help="write one probability map as PGM + CSV + PNG")
    _common(p)
    p.add_argument("--input", help="annotation file (default: --held-out scene under --data)")
    p.add_argument("--frame", type=int, help="time-step index (default: busiest step)")
    p.add_argument("--target", type=int, help="pedestrian id marked as target (default: first present)")

    p = sub.add_parser("train", help="train a model on the training split")
    _common(p)
    p.add_argument("--train-scenes", help="comma-separated scenes to train on (overrides --held-out)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--channels", help="hidden channels per layer, e.g. 128,64,64,32,32")
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint")

    p = sub.add_parser("predict", help="predict trajectories for test samples")
    _common(p)
    p.add_argument("--test-scenes", help="comma-separated scenes (default: --held-out)")
    p.add_argument("--decode", choices=("sample", "argmax"), help="restrict to one decoding mode")
    p.add_argument("--frozen-neighbors", action="store_true")

    p = sub.add_parser("eval", help="ADE/FDE of a model or baseline")
    _common(p)
    p.add_argument("--baseline", choices=("linear", "stationary"))
    p.add_argument("--test-scenes", help="comma-separated scenes evaluated without leave-one-out")
    p.add_argument("--decode", choices=("sample", "argmax"), default="sample")
    p.add_argument("--frozen-neighbors", action="store_true")
    p.add_argument("--sweep", choices=("map_size", "integration", "sampling"),
                   help="ablation table instead of a single evaluation")
    p.add_argument("--sweep-checkpoint", action="append", default=[], metavar="KEY=PATH",
                   help="per-configuration checkpoint (map_size: 80=a.sprb; integration: on=a.sprb off=b.sprb)")

    p = sub.add_parser("baseline", help="linear or stationary baseline under leave-one-out")
    _common(p)
    p.add_argument("--method", choices=("linear", "stationary"), default="linear")

    p = sub.add_parser("export", help="trajectory overlays (CSV + PNG) for a model or baseline")
    _common(p)
    p.add_argument("--baseline", choices=("linear", "stationary"))
    p.add_argument("--test-scenes")
    p.add_argument("--decode", choices=("sample", "argmax"), default="argmax")
    p.add_argument("--figures", type=int, default=4, help="number of per-sample PNG overlays")

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    _common(p)
    p.add_argument("--tiny", action="store_true", help="1 layer, 2 channels, 6x6 grid, 3 steps")
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


# ------------------------------------------------------------------ config

def resolve_config(args, extra: dict | None = None) -> TrainConfig:
    """defaults < --config file < command-line flags."""
    cfg = TrainConfig()
    if getattr(args, "config", None):
        cfg = TrainConfig.from_text(Path(args.config).read_text(), cfg)
    flags = {}
    if args.grid:
        flags["width"], flags["height"] = args.grid
    for name in ("sigma_target", "sigma_other", "obs_len", "pred_len", "seed"):
        if getattr(args, name, None) is not None:
            flags[name] = getattr(args, name)
    if args.no_integration:
        flags["integrate_neighbors"] = False
    for name in ("epochs", "batch_size", "lr"):
        if getattr(args, name, None) is not None:
            flags[name] = getattr(args, name)
    if getattr(args, "channels", None):
        flags["channels"] = args.channels
    flags.update(extra or {})
    return TrainConfig.from_mapping(flags, cfg)


def _k(args) -> int:
    return 20 if args.k is None else args.k


def _data_dir(args) -> str:
    d = args.data or os.environ.get("SOCPROB_DATA")
    if not d:
        raise ConfigError("no data directory: pass --data or set SOCPROB_DATA")
    return d


def _load_scenes(args, names=None):
    from .trajectory_data import BENCHMARK_SCENES, load_benchmark
    return load_benchmark(_data_dir(args), names or BENCHMARK_SCENES)


def _split_names(text):
    return [t.strip().lower() for t in text.split(",") if t.strip()] if text else None


def _test_scenes(args):
    """(train scenes, test scenes) from --test-scenes or --held-out."""
    from .trajectory_data import leave_one_out
    names = _split_names(getattr(args, "test_scenes", None))
    if names:
        return [], _load_scenes(args, names)
    if not args.held_out:
        raise ConfigError("pass --held-out or --test-scenes")
    return leave_one_out(_load_scenes(args), args.held_out)


def _checkpoint_path(args, held_out=None):
    if not args.checkpoint:
        return None
    return args.checkpoint.replace("{held_out}", held_out or (args.held_out or ""))


def _load_model(args, held_out=None):
    from .training import load_checkpoint
    path = _checkpoint_path(args, held_out)
    if not path or not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    ck = load_checkpoint(path)
    cfg = ck.config
    overrides = {}
    if args.sigma_target is not None:
        overrides["sigma_target"] = args.sigma_target
    if args.sigma_other is not None:
        overrides["sigma_other"] = args.sigma_other
    if args.no_integration:
        overrides["integrate_neighbors"] = False
    if overrides:
        cfg = TrainConfig.from_mapping(overrides, cfg)
    return ck, cfg


# ------------------------------------------------------------------ output

class Outputs:
    def __init__(self, args, command):
        self.args = args
        self.command = command
        self.files = []
        self.start = time.time()

    def path(self, suffix=""):
        if not self.args.out:
            return None
        base = Path(self.args.out)
        p = base if not suffix else base.with_name(base.name + suffix)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(str(p))
        return p

    def manifest(self, cfg: TrainConfig | None, extra=None):
        if not self.args.out:
            return
        data = {
            "command": self.command,
            "argv": sys.argv[1:],
            "config": asdict(cfg) if cfg else None,
            "inputs": {"data": self.args.data or os.environ.get("SOCPROB_DATA"),
                       "checkpoint": self.args.checkpoint},
            "outputs": self.files,
            "seed": cfg.seed if cfg else self.args.seed,
            "version": __version__,
            "duration_s": round(time.time() - self.start, 3),
        }
        data.update(extra or {})
        target = Path(self.args.out)
        mpath = target.with_name(target.name + ".manifest.json")
        tmp = mpath.with_name(mpath.name + ".tmp")
        tmp.write_text(json.dumps(data, indent=2, default=str) + "\n")
        tmp.replace(mpath)


def _emit_csv(outputs: Outputs, write, suffix=""):
    """Write through ``write(path)`` to --out, or to stdout."""
    path = outputs.path(suffix)
    if path is None:
        import tempfile
        with tempfile.TemporaryDirectory() as d:
            tmp = Path(d) / "out.csv"
            write(tmp)
            sys.stdout.write(tmp.read_text())
        return None
    write(path)
    return path


def _png(outputs: Outputs, suffix, draw):
    path = outputs.path(suffix)
    if path is not None:
        draw(path)


# ---------------------------------------------------------------- commands

def cmd_ingest(args):
    from .trajectory_data import build_samples, load_scene, serialize_scene
    cfg = resolve_config(args)
    if args.inputs:
        scenes = [load_scene(p, frame_stride=args.frame_stride) for p in args.inputs]
    else:
        scenes = _load_scenes(args)
    lines = ["scene,pedestrians,points,frame_stride,samples"]
    for sc in scenes:
        n_samples = len(build_samples(sc, cfg.obs_len, cfg.pred_len))
        lines.append(f"{sc.name},{len(sc.trajectories)},{len(sc.all_points())},{sc.frame_stride},{n_samples}")
    sys.stdout.write("\n".join(lines) + "\n")
    out = Outputs(args, "ingest")
    if args.out:
        if len(scenes) == 1:
            out.path().write_text(serialize_scene(scenes[0]))
        else:
            base = Path(args.out)
            base.mkdir(parents=True, exist_ok=True)
            for sc in scenes:
                p = base / f"{sc.name}.txt"
                if p.exists():
                    p = base / f"{sc.name}_{len(out.files)}.txt"
                p.write_text(serialize_scene(sc))
                out.files.append(str(p))
        out.manifest(cfg)
    return 0


def cmd_encode(args):
    from . import plotting
    from .prob_map import encode_frame, fit_grid, write_csv, write_pgm
    from .trajectory_data import load_scene
    cfg = resolve_config(args)
    if args.input:
        scene = load_scene(args.input)
    else:
        scenes = _load_scenes(args, [args.held_out] if args.held_out else None)
        scene = scenes[0]
    if not scene.trajectories:
        raise DataError("scene has no trajectories")
    spec = fit_grid(scene, cfg.width, cfg.height, cfg.margin_frac)
    frame = args.frame
    if frame is None:
        counts = {}
        for t in scene.trajectories:
            for f in t.frames:
                counts[int(f)] = counts.get(int(f), 0) + 1
        frame = min(counts, key=lambda f: (-counts[f], f))
    positions = scene.positions_at(frame)
    if not positions:
        raise DataError(f"nobody is present at step {frame}")
    target = args.target if args.target is not None else min(positions)
    if target not in positions:
        raise DataError(f"pedestrian {target} is not present at step {frame}")
    pmap = encode_frame(positions, target, spec, cfg.sigma_target, cfg.sigma_other, cfg.integrate_neighbors)
    out = Outputs(args, "encode")
    if not args.out:
        raise ConfigError("encode needs --out (prefix for .pgm/.csv/.png)")
    write_pgm(pmap, out.path(".pgm"))
    write_csv(pmap, out.path(".csv"))
    _png(out, ".png", lambda p: plotting.heatmap(pmap, p, f"{scene.name} step {frame}, target {target}"))
    print(f"step={frame} target={target} pedestrians={len(positions)} cell_size={spec.cell_size:.6f}")
    out.manifest(cfg, {"frame": frame, "target": target})
    return 0


def cmd_train(args):
    from . import plotting
    from .training import load_checkpoint, sample_groups, save_checkpoint, train, write_loss_log
    from .trajectory_data import leave_one_out
    cfg = resolve_config(args)
    names = _split_names(args.train_scenes)
    if names:
        train_scenes = _load_scenes(args, names)
    elif args.held_out:
        train_scenes, _ = leave_one_out(_load_scenes(args), args.held_out)
    else:
        raise ConfigError("pass --held-out or --train-scenes")
    if not args.out:
        raise ConfigError("train needs --out for the checkpoint")
    resume = None
    if args.resume:
        resume = load_checkpoint(_checkpoint_path(args), expect=cfg)
    groups = sample_groups(train_scenes, cfg, max_samples=args.max_samples)
    n = sum(len(s) for _, s in groups)
    log.info("training on %d samples from %d scene files", n, len(groups))

    def progress(epoch, loss):
        log.info("epoch=%d mean_loss=%.6g", epoch, loss)

    ck = train(groups, cfg, resume=resume, progress=progress)
    out = Outputs(args, "train")
    save_checkpoint(out.path(), ck)
    write_loss_log(out.path(".loss.csv"), ck.loss_log)
    _png(out, ".loss.png", lambda p: plotting.loss_curve(ck.loss_log, p))
    out.manifest(cfg, {"num_samples": n})
    return 0


def _predictor(args, cfg, held_out=None, decode=None, frozen=False):
    from .evaluation import BASELINES, ModelPredictor
    if getattr(args, "baseline", None):
        return BASELINES[args.baseline](), cfg
    ck, mcfg = _load_model(args, held_out)
    return ModelPredictor(ck.params, mcfg, k=_k(args), decode=decode or "sample", joint=not frozen), mcfg


def cmd_eval(args):
    from . import plotting
    from .evaluation import (ablation_sweep, average_report, eval_groups, evaluate_samples,
                             sampling_error_sweep, write_metrics_csv, write_rows_csv)
    cfg = resolve_config(args)
    out = Outputs(args, "eval")
    if args.sweep:
        return _cmd_sweep(args, cfg, out)
    if not args.baseline and not args.checkpoint:
        raise ConfigError("eval needs --baseline or --checkpoint")
    seed = cfg.seed
    reports = []
    names = _split_names(args.test_scenes)
    if names:
        pred, pcfg = _predictor(args, cfg, None, args.decode, args.frozen_neighbors)
        for sc_name in names:
            groups = eval_groups(_load_scenes(args, [sc_name]), pcfg, args.max_samples)
            reports.append(evaluate_samples(pred, groups, seed, sc_name)[0])
    else:
        from .trajectory_data import BENCHMARK_SCENES, leave_one_out
        scenes = _load_scenes(args)
        held = [args.held_out.lower()] if args.held_out else list(BENCHMARK_SCENES)
        for name in held:
            _, test = leave_one_out(scenes, name)
            pred, pcfg = _predictor(args, cfg, name, args.decode, args.frozen_neighbors)
            rep, _ = evaluate_samples(pred, eval_groups(test, pcfg, args.max_samples), seed, name)
            reports.append(rep)
            log.info("%s ade=%.4f fde=%.4f n=%d", name, rep.ade, rep.fde, rep.num_pedestrians)
    if len(reports) > 1:
        reports.append(average_report(reports, seed))
    _emit_csv(out, lambda p: write_metrics_csv(p, reports))
    _png(out, ".png", lambda p: plotting.metric_bars(reports, p))
    out.manifest(cfg, {"method": args.baseline or "model", "k": reports[0].num_samples_k})
    return 0


def _cmd_sweep(args, cfg, out):
    from . import plotting
    from .evaluation import MAP_SIZES, ablation_sweep, sampling_error_sweep, write_rows_csv
    if args.sweep == "sampling":
        scenes = _load_scenes(args, [args.held_out] if args.held_out else None)
        rows = sampling_error_sweep(scenes[0], MAP_SIZES, k=_k(args), seed=cfg.seed,
                                    sigma=cfg.sigma_target, obs_len=cfg.obs_len, pred_len=cfg.pred_len,
                                    margin_frac=cfg.margin_frac, max_samples=args.max_samples)
        for r in rows:
            r["scene"] = scenes[0].name
    else:
        if not args.held_out:
            raise ConfigError("ablation sweeps need --held-out")
        ckpts = {}
        for item in args.sweep_checkpoint:
            if "=" not in item:
                raise ConfigError(f"--sweep-checkpoint expects KEY=PATH, got {item!r}")
            key, path = item.split("=", 1)
            if args.sweep == "integration":
                key = key.lower() in ("on", "true", "1", "yes")
            else:
                key = int(key)
            ckpts[key] = path
        expected = {True, False} if args.sweep == "integration" else set(MAP_SIZES)
        missing = expected - set(ckpts)
        if missing:
            raise ConfigError(f"missing checkpoints for {args.sweep}: {sorted(missing, key=str)}")
        rows = ablation_sweep(args.sweep, ckpts, _load_scenes(args), args.held_out, k=_k(args),
                              seed=cfg.seed, max_samples=args.max_samples)
    _emit_csv(out, lambda p: write_rows_csv(p, rows))
    if args.sweep == "sampling":
        _png(out, ".png", lambda p: plotting.sweep_curve(rows, p, "size", ("mean_point_error", "best_of_k_ade")))
    elif args.sweep == "map_size":
        _png(out, ".png", lambda p: plotting.sweep_curve(
            [dict(r, size=int(r["grid"].split("x")[0])) for r in rows], p, "size", ("ade", "fde")))
    out.manifest(cfg, {"sweep": args.sweep})
    return 0


def cmd_baseline(args):
    args.baseline = args.method
    args.test_scenes = None
    args.decode = "sample"
    args.frozen_neighbors = False
    args.sweep = None
    return cmd_eval(args)


def cmd_predict(args):
    from . import plotting
    from .evaluation import overlay_rows, rollout, write_overlay_csv
    cfg = resolve_config(args)
    _, test = _test_scenes(args)
    ck, mcfg = _load_model(args, args.held_out)
    from .evaluation import eval_groups
    groups = eval_groups(test, mcfg, args.max_samples)
    modes = [args.decode] if args.decode else ["argmax", "sample"]
    rows = []
    idx = 0
    for spec, samples in groups:
        for s in samples:
            rng = np.random.default_rng([mcfg.seed, idx])
            for mode in modes:
                k = 1 if mode == "argmax" else _k(args)
                ro = rollout(ck.params, s, mcfg, spec, mode, rng, k=k, joint=not args.frozen_neighbors)
                for r in range(k):
                    label = f"{s.scene_name}:{s.target_id}@{s.anchor_frame}:{mode}{r if mode == 'sample' else ''}"
                    rows.extend((label,) + row[1:] for row in overlay_rows(s, ro.target()[r])
                                if row[2] == "pred" or (mode == modes[0] and r == 0))
            idx += 1
    out = Outputs(args, "predict")
    _emit_csv(out, lambda p: write_overlay_csv(p, rows))
    _png(out, ".png", lambda p: plotting.trajectories(rows[: 3 * (mcfg.obs_len + 2 * mcfg.pred_len)], p))
    out.manifest(mcfg, {"decode": modes})
    return 0


def cmd_export(args):
    from . import plotting
    from .evaluation import eval_groups, overlay_rows, write_overlay_csv
    cfg = resolve_config(args)
    if not args.baseline and not args.checkpoint:
        raise ConfigError("export needs --baseline or --checkpoint")
    _, test = _test_scenes(args)
    pred, pcfg = _predictor(args, cfg, args.held_out, args.decode)
    groups = eval_groups(test, pcfg, args.max_samples)
    rows, per_sample = [], []
    idx = 0
    for spec, samples in groups:
        for s in samples:
            cand = pred(s, spec, np.random.default_rng([pcfg.seed, idx]))
            r = overlay_rows(s, cand[0], ped_id=f"{s.scene_name}:{s.target_id}@{s.anchor_frame}")
            rows.extend(r)
            per_sample.append(r)
            idx += 1
    out = Outputs(args, "export")
    _emit_csv(out, lambda p: write_overlay_csv(p, rows))
    for i, r in enumerate(per_sample[: args.figures]):
        _png(out, f".{i}.png", lambda p, r=r: plotting.trajectories(r, p, r[0][0]))
    out.manifest(pcfg, {"samples": len(per_sample)})
    return 0


def cmd_gradcheck(args):
    from .gradcheck import TINY, run_gradcheck
    seed = 0 if args.seed is None else args.seed
    if args.tiny:
        errors = run_gradcheck(seed=seed)
    else:
        errors = run_gradcheck(channels=(3, 2), height=7, width=7, steps=4, seed=seed)
    worst = max(errors.values())
    for name, e in errors.items():
        print(f"{name},{e:.3e}")
    print(f"max_relative_error,{worst:.3e}")
    ok = worst < args.tolerance
    print("gradcheck " + ("passed" if ok else "FAILED") + f" (tolerance {args.tolerance:g})", file=sys.stderr)
    return 0 if ok else 3


HANDLERS = {"ingest": cmd_ingest, "encode": cmd_encode, "train": cmd_train, "predict": cmd_predict,
            "eval": cmd_eval, "baseline": cmd_baseline, "export": cmd_export, "gradcheck": cmd_gradcheck}


def _thread_limit(n):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if not args.command:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", force=True)
    try:
        with _thread_limit(args.threads):
            return HANDLERS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ParseError, DataError, DimensionError, DecodeError, CheckpointFormatError,
            CheckpointTruncatedError, FileNotFoundError, UnicodeDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
