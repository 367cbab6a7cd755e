"""Address-event streams: decoding, validation and synthetic fixtures.

Events are held column-wise in numpy arrays (x, y, t, p) which are marked
read-only after validation, so an :class:`EventStream` can be shared freely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, CorruptRecordError, EventValueError, FormatError, ParseError

NMNIST_RECORD_BYTES = 5
NMNIST_MAX_TIMESTAMP = (1 << 23) - 1


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: int
    p: int


class EventStream:
    """A time-sorted, validated recording from a ``width`` x ``height`` sensor.

    Unsorted input is stably sorted by timestamp. Duplicate events are kept.
    """

    __slots__ = ("x", "y", "t", "p", "width", "height")

    def __init__(self, x, y, t, p, width: int, height: int, *, index_offset: int = 0):
        if width <= 0 or height <= 0:
            raise ConfigError(f"sensor dimensions must be positive, got {width}x{height}")
        x = np.asarray(x, dtype=np.int64).ravel()
        y = np.asarray(y, dtype=np.int64).ravel()
        t = np.asarray(t, dtype=np.int64).ravel()
        p = np.asarray(p, dtype=np.int64).ravel()
        if not (len(x) == len(y) == len(t) == len(p)):
            raise FormatError("event columns have different lengths")

        bad = (x < 0) | (x >= width) | (y < 0) | (y >= height)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise CorruptRecordError(
                f"record {i + index_offset}: ({x[i]}, {y[i]}) outside {width}x{height} sensor",
                index=i + index_offset,
            )
        if (t < 0).any():
            i = int(np.flatnonzero(t < 0)[0])
            raise EventValueError(f"record {i + index_offset}: negative timestamp {t[i]}")
        if ((p != 0) & (p != 1)).any():
            i = int(np.flatnonzero((p != 0) & (p != 1))[0])
            raise EventValueError(f"record {i + index_offset}: polarity {p[i]} not in {{0, 1}}")

        if len(t) > 1 and (np.diff(t) < 0).any():
            order = np.argsort(t, kind="stable")
            x, y, t, p = x[order], y[order], t[order], p[order]

        for arr in (x, y, t, p):
            arr.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "width", int(width))
        object.__setattr__(self, "height", int(height))

    def __setattr__(self, name, value):
        raise AttributeError("EventStream is immutable")

    @classmethod
    def from_events(cls, events: Sequence[Event], width: int, height: int) -> "EventStream":
        if not events:
            return cls.empty(width, height)
        cols = np.array([(e.x, e.y, e.t, e.p) for e in events], dtype=np.int64)
        return cls(cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], width, height)

    @classmethod
    def empty(cls, width: int, height: int) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, width, height)

    @property
    def duration(self) -> int:
        """Timestamp of the last event in microseconds (0 for an empty stream)."""
        return int(self.t[-1]) if len(self.t) else 0

    @property
    def events(self) -> list[Event]:
        return list(self)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self.t)):
            yield self[i]

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in "xytp")
        )

    def __repr__(self) -> str:
        return f"EventStream(n={len(self)}, {self.width}x{self.height}, duration={self.duration}us)"


def load_nmnist_bin(data: bytes, width: int = 34, height: int = 34) -> EventStream:
    """Decode the 40-bit-per-event ATIS format used by N-MNIST.

    Record layout: byte0 = x, byte1 = y, bit 7 of byte2 = polarity, and the
    remaining 23 bits (byte2[6:0], byte3, byte4) are a big-endian timestamp.
    """
    if len(data) % NMNIST_RECORD_BYTES:
        raise FormatError(
            f"N-MNIST stream length {len(data)} is not a multiple of {NMNIST_RECORD_BYTES}"
        )
    rec = np.frombuffer(bytes(data), dtype=np.uint8).reshape(-1, NMNIST_RECORD_BYTES).astype(np.int64)
    x = rec[:, 0]
    y = rec[:, 1]
    p = rec[:, 2] >> 7
    t = ((rec[:, 2] & 0x7F) << 16) | (rec[:, 3] << 8) | rec[:, 4]
    return EventStream(x, y, t, p, width, height)


def encode_nmnist_bin(stream: EventStream) -> bytes:
    """Inverse of :func:`load_nmnist_bin`; rejects events the format cannot hold."""
    if len(stream) == 0:
        return b""
    if stream.x.max() > 255 or stream.y.max() > 255:
        raise FormatError("N-MNIST records hold x and y in one byte each")
    if stream.t.max() > NMNIST_MAX_TIMESTAMP:
        raise FormatError(f"timestamp {stream.t.max()} exceeds the 23-bit N-MNIST range")
    rec = np.empty((len(stream), NMNIST_RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = stream.x
    rec[:, 1] = stream.y
    rec[:, 2] = (stream.p << 7) | (stream.t >> 16)
    rec[:, 3] = (stream.t >> 8) & 0xFF
    rec[:, 4] = stream.t & 0xFF
    return rec.tobytes()


def load_aer_csv(text: str, width: int, height: int) -> EventStream:
    """Parse ``x,y,t,p`` lines. Blank lines and ``#`` comments are skipped."""
    rows = []
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) != 4:
            raise ParseError(f"line {lineno}: expected 4 fields 'x,y,t,p', got {len(fields)}", line=lineno)
        try:
            x, y, t, p = (int(f.strip()) for f in fields)
        except ValueError:
            raise ParseError(f"line {lineno}: non-integer field in {line!r}", line=lineno) from None
        if p not in (0, 1):
            raise EventValueError(f"line {lineno}: polarity {p} not in {{0, 1}}")
        rows.append((x, y, t, p))
        lines.append(lineno)
    if not rows:
        return EventStream.empty(width, height)
    cols = np.array(rows, dtype=np.int64)
    try:
        return EventStream(cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], width, height)
    except CorruptRecordError as exc:
        lineno = lines[exc.index]
        raise CorruptRecordError(f"line {lineno}: {exc}", index=exc.index) from None
    except EventValueError as exc:
        raise EventValueError(f"{exc} (CSV input)") from None


def synth_two_class(
    class_id: int,
    width: int,
    height: int,
    duration: int,
    rate: float,
    seed: int,
) -> EventStream:
    """Poisson events on the left (class 0) or right (class 1) half of the sensor.

    Each active pixel emits ``Poisson(rate * duration)`` events with uniform
    integer timestamps in ``[0, duration]`` and uniform polarity.
    """
    if class_id not in (0, 1):
        raise ConfigError(f"class_id must be 0 or 1, got {class_id}")
    if rate <= 0 or duration <= 0:
        raise ConfigError("rate and duration must be positive")
    half = width // 2
    xs = np.arange(0, half) if class_id == 0 else np.arange(half, width)
    if len(xs) == 0 or height == 0:
        raise ConfigError(f"class {class_id} mask is empty on a {width}x{height} sensor")

    rng = np.random.default_rng(seed)
    px, py = np.meshgrid(xs, np.arange(height), indexing="xy")
    px, py = px.ravel(), py.ravel()
    counts = rng.poisson(rate * duration, size=px.size)
    n = int(counts.sum())
    x = np.repeat(px, counts)
    y = np.repeat(py, counts)
    t = rng.integers(0, duration + 1, size=n)
    p = rng.integers(0, 2, size=n)
    return EventStream(x, y, t, p, width, height)
