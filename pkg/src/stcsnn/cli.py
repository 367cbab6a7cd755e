"""Command-line driver: compress, train, eval, gradcheck, tau-stats.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
failure (non-finite loss or a gradient check outside tolerance).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .compress import compress, compression_ratio
from .config import RunConfig
from .datasets import crop_stream, frames_from_streams, labelled_files, read_stream, synthetic_streams
from .errors import ConfigError, DataError, NumericalError, ShapeError, StcsnnError
from .gradcheck import grad_check
from .network import DensePMLIF, load_checkpoint, parse_arch, save_checkpoint
from .neuron import sigmoid
from .train import AdamState, FitConfig, evaluate, fit, format_log_line, init_model

log = logging.getLogger("stcsnn")

CHECKPOINT_NAME = "checkpoint.stck"
LOG_NAME = "train.log"
GRADCHECK_ARCH = "2SC3-AP2-4FC-2Voting"
GRADCHECK_INPUT = (2, 4, 4)
STREAM_SUFFIXES = (".bin", ".csv", ".txt")


def _dtype(precision: int):
    return np.float64 if precision == 64 else np.float32


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.optim.seed = args.seed
    return cfg


def _split(cfg: RunConfig, split: str, T: int, dtype):
    """Frames and labels of one split (``train`` or ``test``)."""
    d = cfg.dataset
    limit = d.limit_train if split == "train" else d.limit_test
    if d.kind == "synthetic":
        n = limit if limit is not None else (200 if split == "train" else 100)
        seed = d.data_seed if split == "train" else d.data_seed + 1
        streams, labels = synthetic_streams(n, d.width, d.height, d.duration, d.rate, seed)
    else:
        root = Path(d.path) / ("Train" if split == "train" else "Test")
        files = labelled_files(root, limit)
        streams = [read_stream(f, d.width, d.height) for f, _ in files]
        labels = np.array([lab for _, lab in files], dtype=np.int64)
    if d.crop:
        streams = [crop_stream(s, d.crop) for s in streams]
    if not streams:
        h, w = cfg.input_shape[1:]
        return np.zeros((0, T, 2, h, w), dtype=dtype), np.zeros(0, dtype=np.int64)
    frames = frames_from_streams(streams, T, cfg.model.N_r, cfg.model.binary_mode, dtype=dtype)
    return frames, np.asarray(labels, dtype=np.int64)


def _check_labels(labels, n_class):
    if len(labels) and (labels.min() < 0 or labels.max() >= n_class):
        raise DataError(f"labels must lie in [0, {n_class}), found {labels.min()}..{labels.max()}")


# --- compress --------------------------------------------------------------

def _stream_files(inputs):
    out = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            out += [(f, f.relative_to(p)) for f in sorted(p.rglob("*"))
                    if f.is_file() and f.suffix.lower() in STREAM_SUFFIXES]
        elif p.is_file():
            out.append((p, Path(p.name)))
        else:
            raise DataError(f"{p}: no such file or directory")
    return out


def cmd_compress(args) -> int:
    cfg = _load_config(args)
    T = args.T if args.T is not None else cfg.model.T
    n_r = args.nr if args.nr is not None else cfg.model.N_r
    binary = args.binary or cfg.model.binary_mode
    width = args.width if args.width is not None else cfg.dataset.width
    height = args.height if args.height is not None else cfg.dataset.height
    if T < 1 or n_r < 1:
        raise ConfigError("T and N_r must be >= 1")
    files = _stream_files(args.inputs)
    if not files:
        raise DataError("no input recordings found")
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    nonzero = total = 0
    shape = None
    for src, rel in files:
        stream = read_stream(src, width, height)
        frames = compress(stream, T, n_r, binary=binary)
        dst = out_dir / rel.with_suffix(".frames")
        dst.parent.mkdir(parents=True, exist_ok=True)
        dst.write_bytes(frames.to_bytes())
        nz = int(np.count_nonzero(frames.data))
        nonzero += nz
        total += frames.data.size
        shape = frames.shape
        print(f"{src}\t{list(frames.shape)}\tevents={len(stream)}\tdensity={nz / frames.data.size:.4f}")
    print(f"samples: {len(files)}")
    print(f"T: {T}  N_r: {n_r}  shape: {list(shape)}")
    print(f"nonzero density: {nonzero / total:.6f}")
    if args.baseline_frames is not None:
        if args.baseline_frames <= 0:
            raise ConfigError("--baseline-frames must be positive")
        print(f"compression ratio vs {args.baseline_frames:g} frames: {compression_ratio(args.baseline_frames, T):.4f}%")
    return 0


# --- train -----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args)
    config = cfg.network_config()
    dtype = _dtype(args.precision)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / CHECKPOINT_NAME
    log_path = out_dir / LOG_NAME

    adam, start = None, 0
    if args.resume:
        model, state = load_checkpoint(args.resume)
        if model.config.arch != config.arch or model.config.T != config.T or model.input_shape != cfg.input_shape:
            raise ConfigError("checkpoint architecture or input shape does not match the configuration")
        if model.dtype != dtype:
            log.warning("using the checkpoint's precision (%s)", np.dtype(model.dtype).name)
            dtype = model.dtype
        if state is not None:
            start = int(state.get("epoch", 0))
            if state.get("adam") is not None:
                adam = AdamState.from_dict(state["adam"])
    else:
        model = init_model(config, cfg.input_shape, cfg.optim.seed, dtype=dtype)

    train_x, train_y = _split(cfg, "train", config.T, dtype)
    test_x, test_y = _split(cfg, "test", config.T, dtype)
    _check_labels(train_y, config.n_classes)
    _check_labels(test_y, config.n_classes)
    fc = FitConfig(lr=cfg.optim.lr, batch_size=cfg.optim.batch, epochs=cfg.optim.epochs,
                   seed=cfg.optim.seed, desired_count=cfg.model.desired_count, threads=args.threads)
    if adam is None:
        adam = AdamState(lr=fc.lr)

    with open(log_path, "a" if args.resume else "w", encoding="utf-8") as log_fh:
        def on_epoch(epoch, loss, train_acc, test_acc, seconds, state):
            line = format_log_line(epoch, loss, train_acc, test_acc, seconds)
            log_fh.write(line + "\n")
            log_fh.flush()
            print(line)
            save_checkpoint(ckpt_path, model, {"epoch": epoch + 1, "adam": state.to_dict()})

        save_checkpoint(ckpt_path, model, {"epoch": start, "adam": adam.to_dict()})
        fit(model, train_x, train_y, test_x, test_y, fc, adam=adam, start_epoch=start, on_epoch=on_epoch)
    print(f"checkpoint: {ckpt_path}")
    return 0


# --- eval ------------------------------------------------------------------

def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model, _ = load_checkpoint(args.checkpoint)
    if model.input_shape != cfg.input_shape:
        raise ConfigError(f"checkpoint expects input {list(model.input_shape)}, dataset gives {list(cfg.input_shape)}")
    frames, labels = _split(cfg, args.split, model.config.T, model.dtype)
    _check_labels(labels, model.config.n_classes)
    acc, confusion = evaluate(model, frames, labels, threads=args.threads)
    print(f"samples: {len(labels)}")
    print(f"accuracy: {acc:.6f}")
    print("confusion (rows true, columns predicted):")
    for row in confusion:
        print(" ".join(str(int(v)) for v in row))
    return 0


# --- gradcheck -------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    if args.config:
        cfg = _load_config(args)
        config = cfg.network_config()
        shape = cfg.input_shape
        dc = cfg.model.desired_count
    else:
        config = parse_arch(args.arch or GRADCHECK_ARCH, args.T)
        shape = GRADCHECK_INPUT
        dc = 1
    report = grad_check(config, shape, seed=args.seed or 0, desired_count=dc, perturb=args.perturb)
    print(report.format())
    return 0 if report.passed else 3


# --- tau-stats -------------------------------------------------------------

def tau_stats(model, bins: int = 20) -> list[dict]:
    """Per dense layer: count, mean, std and a histogram of the leak factors."""
    out = []
    for i, layer in enumerate(model.config.layers):
        if not isinstance(layer, DensePMLIF):
            continue
        vals = sigmoid(np.asarray(model.params[f"{i}.wm"], dtype=np.float64))
        hist, edges = np.histogram(vals, bins=bins, range=(0.0, 1.0))
        out.append({"layer": i, "count": int(vals.size), "mean": float(vals.mean()),
                    "std": float(vals.std()), "hist": hist, "edges": edges})
    return out


def cmd_tau_stats(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    stats = tau_stats(model)
    if not stats:
        print("no PMLIF layers")
    for st in stats:
        print(f"layer {st['layer']}: count {st['count']} mean {st['mean']:.6f} std {st['std']:.6f}")
        edges = st["edges"]
        for k, c in enumerate(st["hist"]):
            print(f"  [{edges[k]:.2f}, {edges[k + 1]:.2f})\t{int(c)}")
    return 0


# --- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stcsnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, threads=True, precision=True):
        p.add_argument("--config", help="JSON run configuration")
        if seed:
            p.add_argument("--seed", type=int, help="override optim.seed")
        if threads:
            p.add_argument("--threads", type=int, default=1, help="per-sample worker threads")
        if precision:
            p.add_argument("--precision", type=int, choices=(32, 64), default=32)

    p = sub.add_parser("compress", help="event recordings -> frame tensor files")
    common(p, seed=False, threads=False, precision=False)
    p.add_argument("inputs", nargs="+", help="recordings (.bin, .csv, .txt) or directories of them")
    p.add_argument("-o", "--output", required=True, help="output directory for .frames files")
    p.add_argument("--T", type=int)
    p.add_argument("--nr", type=int)
    p.add_argument("--binary", action="store_true", help="clamp sub-window counts to 1")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--baseline-frames", type=float, help="frame count of a baseline encoding")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("train", help="train a network from a run configuration")
    common(p)
    p.add_argument("--out", default="run", help="directory for the checkpoint and log")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    common(p, precision=False)
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify gradients on a tiny network")
    common(p, threads=False, precision=False)
    p.add_argument("--arch", help=f"architecture string (default {GRADCHECK_ARCH} on 2x4x4 input)")
    p.add_argument("--T", type=int, default=2)
    p.add_argument("--perturb", help="corrupt this parameter block's gradient (fault injection)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("tau-stats", help="distribution of sigmoid(w_m) per dense layer")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_tau_stats)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return 1
    if isinstance(exc, (DataError, ShapeError)):
        return 2
    if isinstance(exc, (NumericalError, FloatingPointError)):
        return 3
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except StcsnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)
    except KeyError as exc:
        # unknown block name passed to --perturb
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
