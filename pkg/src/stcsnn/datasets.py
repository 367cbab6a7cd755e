"""Dataset assembly: turn recordings into stacked frame tensors with labels."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .compress import compress
from .errors import DataError
from .events import EventStream, load_aer_csv, load_nmnist_bin, synth_two_class


def crop_stream(stream: EventStream, size) -> EventStream:
    """Centre-crop a stream to ``(height, width)``, dropping events outside."""
    h, w = size
    if h > stream.height or w > stream.width:
        raise DataError(f"crop {h}x{w} larger than sensor {stream.height}x{stream.width}")
    oy = (stream.height - h) // 2
    ox = (stream.width - w) // 2
    keep = (stream.x >= ox) & (stream.x < ox + w) & (stream.y >= oy) & (stream.y < oy + h)
    return EventStream(stream.x[keep] - ox, stream.y[keep] - oy, stream.t[keep], stream.p[keep], w, h)


def frames_from_streams(streams, T: int, n_r: int, binary: bool = False, dtype=np.float32) -> np.ndarray:
    return np.stack([compress(s, T, n_r, binary=binary, dtype=dtype).data for s in streams])


def synthetic_streams(n: int, width: int, height: int, duration: int, rate: float, seed: int):
    """``n`` two-class streams with labels drawn from ``seed``."""
    rng = np.random.default_rng([seed, 0])
    labels = rng.integers(0, 2, size=n)
    streams = [synth_two_class(int(c), width, height, duration, rate, seed=[seed, 1, k])
               for k, c in enumerate(labels)]
    return streams, labels


def synthetic_dataset(n: int, width: int, height: int, duration: int, rate: float, seed: int,
                      T: int, n_r: int, binary: bool = False, dtype=np.float32):
    streams, labels = synthetic_streams(n, width, height, duration, rate, seed)
    return frames_from_streams(streams, T, n_r, binary, dtype), labels


def read_stream(path, width: int, height: int) -> EventStream:
    """Load one recording; ``.csv``/``.txt`` are AER text, anything else N-MNIST binary."""
    path = Path(path)
    try:
        if path.suffix.lower() in (".csv", ".txt"):
            return load_aer_csv(path.read_text(encoding="utf-8"), width, height)
        return load_nmnist_bin(path.read_bytes(), width, height)
    except DataError as exc:
        raise type(exc)(f"{path}: {exc}") from None
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from None


def labelled_files(root, limit: int | None = None):
    """``root/<label>/<file>`` layout (N-MNIST's Train/ and Test/ directories).

    Files are taken round-robin over labels in sorted order so a limit keeps
    the classes balanced.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    per_class = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            label = int(d.name)
        except ValueError:
            continue
        files = sorted(f for f in d.iterdir() if f.is_file())
        per_class.append((label, files))
    out = []
    k = 0
    while per_class and (limit is None or len(out) < limit):
        added = False
        for label, files in per_class:
            if k < len(files):
                out.append((files[k], label))
                added = True
                if limit is not None and len(out) >= limit:
                    break
        if not added:
            break
        k += 1
    return out


def nmnist_root() -> Path | None:
    """Location of an N-MNIST copy (``Train/`` and ``Test/``), if configured."""
    env = os.environ.get("NMNIST_ROOT")
    if env and (Path(env) / "Train").is_dir() and (Path(env) / "Test").is_dir():
        return Path(env)
    return None
