"""Command line entry points: gen, train, eval, score, bench, gradcheck.

Exit codes: 0 success, 1 a check failed (gradcheck), 2 usage error, 3 data
error.  Errors are reported on stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import data as D
from . import inference as I
from . import train as T
from .config import ConfigError, InferenceOptions, RunConfig
from .detection import extract_detections
from .losses import LossConfig, RegKind
from .metrics import mp_map
from .model import count_params
from .numkernel import ContractError, DimensionError

log = logging.getLogger("otrdet")

EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DATA = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=32)


def _opt(p, *flags, default, help, **kw):
    """Flag whose absence leaves the config-file value alone; ``default`` is for --help."""
    p.add_argument(*flags, default=argparse.SUPPRESS, help=f"{help} (default: {default})", **kw)


def _write_json(path, doc) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    d = cfg.to_dict()
    flag_map = {
        "epochs": ("train", "epochs"), "batch_size": ("train", "batch_size"), "lr": ("train", "lr"),
        "seed": ("train", "seed"), "clip_len": ("train", "clip_len"), "clip_stride": ("train", "stride"),
        "grad_clip": ("train", "grad_clip"),
        "gamma": ("loss", "gamma"), "alpha": ("loss", "alpha"), "lam": ("loss", "lam"), "reg": ("loss", "reg_kind"),
        "window_w": ("loss", "window_w"),
        "mode": ("inference", "mode"), "window": ("inference", "window"), "stride": ("inference", "stride"),
        "theta": ("inference", "theta"), "nms_radius": ("inference", "nms_radius"),
        "data_dir": ("data", "data_dir"),
    }
    for dest, (section, key) in flag_map.items():
        if dest in args:
            d[section][key] = getattr(args, dest)
    return RunConfig.from_dict(d)


# --------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    spec_kw = json.loads(Path(args.spec).read_text()) if args.spec else {}
    for key in ("num_frames", "feature_dim", "dims_per_class", "noise", "action_rate", "distractor_rate",
                "mean_duration"):
        if key in args:
            spec_kw[key] = getattr(args, key)
    seed = getattr(args, "seed", spec_kw.pop("seed", 0))
    spec_kw.pop("num_videos", None)
    spec_kw.pop("video_prefix", None)
    try:
        D.SynthSpec(**spec_kw).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"generator settings: {exc}") from None
    splits = D.generate_benchmark(seed, getattr(args, "num_train", 40), getattr(args, "num_val", 10),
                                  getattr(args, "num_test", 10), **spec_kw)
    out = Path(args.out_dir)
    for name, (seqs, gts) in splits.items():
        D.save_split(out / name, seqs, gts)
    _write_json(out / "spec.json", {"seed": seed, **D.SynthSpec(**spec_kw).to_dict()})
    summary = {name: {"videos": len(s), "actions": len(g)} for name, (s, g) in splits.items()}
    _write_json(None, summary)
    return 0


def _split_dir(cfg: RunConfig, name: str) -> Path:
    if cfg.data.data_dir is None:
        raise UsageError("no data directory: pass --data-dir or set data.data_dir in the config")
    return Path(cfg.data.data_dir) / name


def cmd_train(args) -> int:
    cfg = _load_config(args)
    tc = cfg.train_config()
    train_data = D.load_split(_split_dir(cfg, cfg.data.train_split))
    val_dir = _split_dir(cfg, cfg.data.val_split)
    val_data = D.load_split(val_dir) if val_dir.exists() else None
    resume = T.load_checkpoint(args.resume, tc.model) if args.resume else None
    _, history = T.train(train_data, val_data, tc, checkpoint_path=args.out, resume=resume)
    ck = T.load_checkpoint(args.out)
    doc = {"history": history, "best_epoch": ck.meta.get("best_epoch"), "best_score": ck.meta.get("best_score"),
           "config": cfg.to_dict(), "num_params": count_params(ck.model())}
    _write_json(args.history, doc)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    inf = cfg.inference
    ck = T.load_checkpoint(args.checkpoint)
    params = ck.model(best=not args.last)
    split = args.split or cfg.data.test_split
    seqs, gts = D.load_split(_split_dir(cfg, split))
    if inf.mode == "streaming":
        probs = I.infer_streaming_many(params, seqs)
    else:
        probs = [I.infer_sliding(params, fs, inf.window, inf.stride) for fs in seqs]
    dets = [d for fp in probs for d in extract_detections(fp, inf.theta, inf.nms_radius)]
    report = mp_map(dets, gts)
    if args.detections:
        D.write_detections(args.detections, dets)
    doc = {"inference": asdict(inf), "split": split, **report.to_dict()}
    _write_json(args.report, doc)
    if args.report:
        print(report.table())
    return 0


def cmd_score(args) -> int:
    dets = D.read_detections(args.detections)
    gts = D.read_annotations(args.annotations)
    report = mp_map(dets, gts)
    _write_json(args.report, report.to_dict())
    if args.report:
        print(report.table())
    return 0


def cmd_bench(args) -> int:
    ck = T.load_checkpoint(args.checkpoint)
    fs = D.read_features(args.features)
    rep = I.benchmark(ck.model(), fs, args.mode, args.repeats, args.window, args.stride)
    if args.steps_csv:
        with open(args.steps_csv, "w") as fh:
            fh.write("frame_index,step_time_s\n")
            for i, t in enumerate(rep.step_times_s):
                fh.write(f"{i},{t!r}\n")
    _write_json(args.report, rep.to_dict())
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    rep = T.gradient_audit(cfg.model, args.seed, args.frames, args.max_entries or None, args.h, args.tol,
                           LossConfig(**{**cfg.loss.to_dict(), "lam": max(cfg.loss.lam, 0.5)}))
    _write_json(args.report, {"model": cfg.model.to_dict(), "frames": args.frames, "seed": args.seed,
                              **rep.to_dict()})
    return 0 if rep.passed else EXIT_CHECK_FAILED


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="otrdet", description="Online take/release detection with a selective state-space model.",
                     formatter_class=_fmt)
    parser.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP thread cap (1 keeps runs bit-identical)")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic benchmark (train/val/test splits)", formatter_class=_fmt)
    g.add_argument("--out-dir", required=True, help="output directory")
    g.add_argument("--spec", help="JSON file of generator settings (SynthSpec fields)")
    _opt(g, "--seed", type=int, default=0, help="benchmark seed")
    _opt(g, "--num-train", type=int, default=40, help="training videos")
    _opt(g, "--num-val", type=int, default=10, help="validation videos")
    _opt(g, "--num-test", type=int, default=10, help="test videos")
    spec = D.SynthSpec()
    _opt(g, "--num-frames", type=int, default=spec.num_frames, help="frames per video")
    _opt(g, "--feature-dim", type=int, default=spec.feature_dim, help="feature dimension")
    _opt(g, "--dims-per-class", type=int, default=spec.dims_per_class, help="feature dims carrying each class")
    _opt(g, "--noise", type=float, default=spec.noise, help="Gaussian noise std")
    _opt(g, "--action-rate", type=float, default=spec.action_rate, help="actions per minute")
    _opt(g, "--distractor-rate", type=float, default=spec.distractor_rate, help="aborted ramps per minute")
    _opt(g, "--mean-duration", type=float, default=spec.mean_duration, help="mean action length in frames")
    g.set_defaults(func=cmd_gen)

    tc = T.TrainConfig()
    t = sub.add_parser("train", help="train a model and write a checkpoint", formatter_class=_fmt)
    t.add_argument("--config", help="run config JSON")
    _opt(t, "--data-dir", default=None, help="benchmark directory holding train/ and val/ splits")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="where to write the history JSON (stdout if omitted)")
    t.add_argument("--resume", help="checkpoint to continue from")
    _opt(t, "--epochs", type=int, default=tc.epochs, help="training epochs")
    _opt(t, "--batch-size", type=int, default=tc.batch_size, help="clips per step")
    _opt(t, "--lr", type=float, default=tc.lr, help="Adam learning rate")
    _opt(t, "--seed", type=int, default=tc.seed, help="initialisation and shuffling seed")
    _opt(t, "--clip-len", type=int, default=tc.clip_len, help="training clip length in frames")
    _opt(t, "--clip-stride", type=int, default="clip length", help="stride between training clips")
    _opt(t, "--grad-clip", type=float, default=tc.grad_clip, help="global gradient norm cap")
    _opt(t, "--gamma", type=float, default=tc.loss.gamma, help="focal exponent (0 with --alpha 1 1 1 is cross-entropy)")
    _opt(t, "--alpha", type=float, nargs=3, metavar=("TAKE", "RELEASE", "BG"), default=" ".join(map(str, tc.loss.alpha)),
         help="per-class focal weights")
    _opt(t, "--lam", type=float, default=tc.loss.lam, help="regulariser weight")
    _opt(t, "--reg", choices=[k.value for k in RegKind], default=tc.loss.reg_kind.value, help="regulariser")
    _opt(t, "--window-w", type=int, default=tc.loss.window_w, help="regulariser window in frames")
    t.set_defaults(func=cmd_train)

    inf = InferenceOptions()
    e = sub.add_parser("eval", help="run inference on a split and compute mp-mAP", formatter_class=_fmt)
    e.add_argument("--config", help="run config JSON")
    e.add_argument("--checkpoint", required=True, help="checkpoint path")
    _opt(e, "--data-dir", default=None, help="benchmark directory")
    e.add_argument("--split", help="split to evaluate (default: data.test_split, i.e. test)")
    e.add_argument("--last", action="store_true", help="use the last epoch's weights, not the best")
    _opt(e, "--mode", choices=["streaming", "sliding"], default=inf.mode, help="inference regime")
    _opt(e, "--window", type=int, default=inf.window, help="sliding window length")
    _opt(e, "--stride", type=int, default=inf.stride, help="sliding window stride")
    _opt(e, "--theta", type=float, default=inf.theta, help="detection score threshold")
    _opt(e, "--nms-radius", type=int, default=inf.nms_radius, help="peak-picking radius in frames")
    e.add_argument("--report", help="report JSON path (stdout if omitted)")
    e.add_argument("--detections", help="also write detections CSV here")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", help="mp-mAP of a detections CSV against annotations", formatter_class=_fmt)
    s.add_argument("--detections", required=True, help="detections CSV")
    s.add_argument("--annotations", required=True, help="annotations CSV")
    s.add_argument("--report", help="report JSON path (stdout if omitted)")
    s.set_defaults(func=cmd_score)

    b = sub.add_parser("bench", help="latency of streaming or sliding inference", formatter_class=_fmt)
    b.add_argument("--checkpoint", required=True, help="checkpoint path")
    b.add_argument("--features", required=True, help="feature file (.otrf)")
    b.add_argument("--mode", choices=["streaming", "sliding"], default="streaming", help="inference regime")
    b.add_argument("--repeats", type=int, default=3, help="timed passes after one warm-up")
    b.add_argument("--window", type=int, default=20, help="sliding window length")
    b.add_argument("--stride", type=int, default=20, help="sliding window stride")
    b.add_argument("--report", help="report JSON path (stdout if omitted)")
    b.add_argument("--steps-csv", help="dump per-step timings as CSV")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("gradcheck", help="finite-difference audit of every model parameter", formatter_class=_fmt)
    c.add_argument("--config", help="run config JSON (model and loss sections are used)")
    c.add_argument("--seed", type=int, default=0, help="initialisation and input seed")
    c.add_argument("--frames", type=int, default=8, help="clip length")
    c.add_argument("--max-entries", type=int, default=256, help="entries probed per tensor (0 = all)")
    c.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    c.add_argument("--tol", type=float, default=1e-2, help="relative error tolerance")
    c.add_argument("--report", help="report JSON path (stdout if omitted)")
    c.set_defaults(func=cmd_gradcheck)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except (D.FormatError, FileNotFoundError, IsADirectoryError, DimensionError, ContractError,
            json.JSONDecodeError) as exc:
        return _fail(EXIT_DATA, "data", f"{type(exc).__name__}: {exc}")
    except T.TrainingError as exc:
        return _fail(EXIT_DATA, "training", str(exc))
    except ValueError as exc:
        return _fail(EXIT_DATA, "data", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
