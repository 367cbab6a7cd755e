"""Spatio-temporal compression of event streams into few-step frame tensors.

The recording ``[0, duration]`` is cut into ``T`` slices of equal length
``floor(duration / T)`` (the last slice absorbs the remainder). Each slice is
cut again into ``N_r`` sub-windows; the event count of sub-window ``k`` is
weighted by ``2**k`` and summed per (polarity, y, x). Sub-windows are
half-open, except the very last one, which also holds ``t == duration``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .events import EventStream


@dataclass(frozen=True)
class SliceBounds:
    lower: int
    upper: int


@dataclass(frozen=True)
class FrameTensor:
    """Compressed input of shape ``[T, 2, H, W]``; channel index equals polarity."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[1] != 2:
            raise FormatError(f"frame tensor must be [T, 2, H, W], got {self.data.shape}")

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def to_bytes(self) -> bytes:
        """Four little-endian int32 dims followed by little-endian float32 values."""
        return struct.pack("<4i", *self.data.shape) + self.data.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FrameTensor":
        if len(blob) < 16:
            raise FormatError("frame tensor blob shorter than its 16-byte header")
        dims = struct.unpack("<4i", blob[:16])
        if min(dims) < 0:
            raise FormatError(f"negative dimension in frame tensor header {dims}")
        n = int(np.prod(dims))
        if len(blob) != 16 + 4 * n:
            raise FormatError(f"frame tensor payload has {len(blob) - 16} bytes, expected {4 * n}")
        data = np.frombuffer(blob, dtype="<f4", offset=16).reshape(dims).astype(np.float32)
        return cls(data)


def slice_bounds(j: int, T: int, duration: int) -> SliceBounds:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0 <= j < T:
        raise IndexError(f"slice index {j} out of range for T={T}")
    step = duration // T
    upper = duration if j == T - 1 else step * (j + 1)
    return SliceBounds(step * j, upper)


def subwindow_bounds(bounds: SliceBounds, k: int, n_r: int) -> tuple[int, int]:
    width = bounds.upper - bounds.lower
    return bounds.lower + (k * width) // n_r, bounds.lower + ((k + 1) * width) // n_r


def _check_args(T: int, n_r: int) -> None:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if n_r < 1:
        raise ConfigError(f"N_r must be >= 1, got {n_r}")


def window_indices(t: np.ndarray, T: int, n_r: int, duration: int) -> tuple[np.ndarray, np.ndarray]:
    """Slice index ``j`` and sub-window index ``k`` of every timestamp in ``t``."""
    t = np.asarray(t, dtype=np.int64)
    step = duration // T
    if step > 0:
        j = np.minimum(t // step, T - 1)
    else:
        j = np.full(t.shape, T - 1, dtype=np.int64)
    lower = step * j
    upper = np.where(j == T - 1, duration, step * (j + 1))
    width = upper - lower
    r = t - lower
    # largest k with floor(k * width / n_r) <= r
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(width > 0, ((r + 1) * n_r - 1) // np.maximum(width, 1), n_r - 1)
    k = np.minimum(k, n_r - 1)
    return j, k


def compress(stream: EventStream, T: int, n_r: int = 8, *, binary: bool = False,
             dtype=np.float32) -> FrameTensor:
    """Weighted event counts per slice, sub-window and pixel.

    With ``binary=True`` each sub-window count is clamped to 1 before weighting.
    """
    _check_args(T, n_r)
    H, W = stream.height, stream.width
    out = np.zeros((T, 2, H, W), dtype=np.float64)
    if len(stream) == 0:
        return FrameTensor(out.astype(dtype))

    j, k = window_indices(stream.t, T, n_r, stream.duration)
    # flat index over (j, k, p, y, x)
    flat = (((j * n_r + k) * 2 + stream.p) * H + stream.y) * W + stream.x
    counts = np.bincount(flat, minlength=T * n_r * 2 * H * W).reshape(T, n_r, 2, H, W)
    if binary:
        counts = np.minimum(counts, 1)
    weights = 2.0 ** np.arange(n_r)
    out = np.einsum("tkpyx,k->tpyx", counts.astype(np.float64), weights)
    return FrameTensor(out.astype(dtype))


def compress_oracle(stream: EventStream, T: int, n_r: int = 8, *, binary: bool = False) -> FrameTensor:
    """Naive reference: scan every (slice, sub-window) for every event."""
    frames, _ = _oracle_scan(stream, T, n_r, binary)
    return frames


def window_membership(stream: EventStream, T: int, n_r: int) -> list[int]:
    """Number of (slice, sub-window) windows containing each event."""
    _, hits = _oracle_scan(stream, T, n_r, False)
    return hits


def _oracle_scan(stream, T, n_r, binary):
    # every (slice, sub-window) interval is tested against every event; no
    # index arithmetic is shared with window_indices
    _check_args(T, n_r)
    H, W = stream.height, stream.width
    duration = stream.duration
    out = np.zeros((T, 2, H, W), dtype=np.float64)
    hits = np.zeros(len(stream), dtype=np.int64)
    for j in range(T):
        b = slice_bounds(j, T, duration)
        for k in range(n_r):
            lo, hi = subwindow_bounds(b, k, n_r)
            inside = (stream.t >= lo) & (stream.t < hi)
            if j == T - 1 and k == n_r - 1:
                inside |= stream.t == hi
            hits += inside
            counts = np.zeros((2, H, W), dtype=np.int64)
            np.add.at(counts, (stream.p[inside], stream.y[inside], stream.x[inside]), 1)
            if binary:
                counts = np.minimum(counts, 1)
            out[j] += (2 ** k) * counts
    return FrameTensor(out.astype(np.float32)), hits.tolist()


def compression_ratio(source_frames: float, T: int) -> float:
    """``T`` as a percentage of the frame count a baseline pipeline uses."""
    if source_frames <= 0 or T <= 0:
        raise ConfigError("source_frames and T must be positive")
    return 100.0 * T / source_frames
