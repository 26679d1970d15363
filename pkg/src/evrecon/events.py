"""Event data model, stream I/O, windowing and fixed-size representations.

Events are held column-wise (``t``, ``x``, ``y``, ``p`` arrays) so that a
window is a cheap slice of its parent stream.  Timestamps are integer
microseconds.  Grids are stored numpy-style as ``[row, col] == [y, x]``.
"""

import heapq
import io
import os
import struct
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .errors import (
    CoordinateOutOfRange,
    CorruptHeader,
    MalformedLine,
    NonMonotoneTimestamp,
)

DEFAULT_BINS = 5
DEFAULT_WINDOW_DENSITY = 0.35
LENIENT_LOOKAHEAD_US = 1000

BINARY_MAGIC = b"EVT1"
# magic, width, height, event count
BINARY_HEADER = struct.Struct("<4sIIQ")
BINARY_RECORD = np.dtype(
    [("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "i1")]
)
assert BINARY_RECORD.itemsize == 14


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True)
class SensorGeometry:
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"sensor geometry must be at least 1x1, got {self.w}x{self.h}")

    @property
    def shape(self):
        return (self.h, self.w)


DAVIS346 = SensorGeometry(346, 260)


def default_window_size(geometry):
    """Events per window used when none is configured (~0.35 events/pixel)."""
    return max(1, int(round(DEFAULT_WINDOW_DENSITY * geometry.w * geometry.h)))


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.flags.writeable = False
    return a


class EventStream:
    """Time-ordered events of one sensor, stored as parallel arrays."""

    def __init__(self, t, x, y, p, geometry):
        self.t = _frozen(t, np.int64)
        self.x = _frozen(x, np.int32)
        self.y = _frozen(y, np.int32)
        self.p = _frozen(p, np.int8)
        self.geometry = geometry
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event arrays differ in length")

    @classmethod
    def empty(cls, geometry):
        return cls([], [], [], [], geometry)

    @classmethod
    def from_events(cls, events, geometry):
        events = list(events)
        return cls(
            [e.t for e in events], [e.x for e in events],
            [e.y for e in events], [e.p for e in events], geometry,
        )

    def __len__(self):
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for x, y, t, p in zip(self.x.tolist(), self.y.tolist(), self.t.tolist(), self.p.tolist()):
            yield Event(x, y, t, p)

    def __getitem__(self, sl):
        if not isinstance(sl, slice):
            i = int(sl)
            return Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))
        return EventStream(self.t[sl], self.x[sl], self.y[sl], self.p[sl], self.geometry)

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    def validate(self):
        check_bounds(self.x, self.y, self.geometry)
        if not np.all(np.isin(self.p, (-1, 1))):
            raise ValueError("polarity must be +1 or -1")
        if len(self.t) > 1 and np.any(np.diff(self.t) < 0):
            raise NonMonotoneTimestamp("timestamps decrease within stream")


@dataclass(frozen=True, eq=False)
class EventWindow:
    events: EventStream
    k: int

    def __post_init__(self):
        if len(self.events) == 0:
            raise ValueError("event window must be non-empty")

    def __len__(self):
        return len(self.events)

    @property
    def t_start(self):
        return int(self.events.t[0])

    @property
    def t_end(self):
        return int(self.events.t[-1])

    @property
    def duration(self):
        return self.t_end - self.t_start

    @property
    def t_mid(self):
        return (self.t_start + self.t_end) // 2


@dataclass(frozen=True, eq=False)
class EventFrame:
    values: np.ndarray  # (h, w) signed polarity sums


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    values: np.ndarray  # (B, h, w)
    bins: int
    span_us: int


def check_bounds(x, y, geometry):
    x = np.asarray(x)
    y = np.asarray(y)
    bad = (x < 0) | (x >= geometry.w) | (y < 0) | (y >= geometry.h)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise CoordinateOutOfRange(
            f"event {i} at ({int(x[i])}, {int(y[i])}) outside {geometry.w}x{geometry.h} sensor"
        )


# ---------------------------------------------------------------- parsing


def _seconds_to_us(tok):
    """Decimal seconds string to integer microseconds, rounding half up."""
    neg = tok.startswith("-")
    if neg or tok.startswith("+"):
        tok = tok[1:]
    if "e" in tok or "E" in tok:
        val = int(round(float(tok) * 1e6))
        return -val if neg else val
    whole, _, frac = tok.partition(".")
    if not (whole or frac) or (whole and not whole.isdigit()) or (frac and not frac.isdigit()):
        raise ValueError(tok)
    frac = frac.ljust(7, "0")
    val = int(whole or "0") * 1_000_000 + int(frac[:6])
    if int(frac[6]) >= 5:
        val += 1
    return -val if neg else val


def _parse_text_lines(text, time_unit):
    ts, xs, ys, ps = [], [], [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 4:
            raise MalformedLine(f"line {lineno}: expected 4 fields 't x y p', got {len(tok)}")
        try:
            t = _seconds_to_us(tok[0]) if time_unit == "s" else int(tok[0])
            x = int(tok[1])
            y = int(tok[2])
            p = int(tok[3])
        except ValueError:
            raise MalformedLine(f"line {lineno}: cannot parse {line!r}") from None
        if p == 0:
            p = -1
        elif p not in (1, -1):
            raise MalformedLine(f"line {lineno}: polarity must be 1, 0 or -1, got {p}")
        ts.append(t)
        xs.append(x)
        ys.append(y)
        ps.append(p)
    return ts, xs, ys, ps


def _lenient_order(t):
    """Stable ordering permutation using a bounded reorder buffer.

    Events arriving more than the lookahead behind the newest timestamp
    seen are dropped.  Returns the indices to keep, in output order.
    """
    heap = []
    out = []
    newest = None
    last_out = None
    for i, ti in enumerate(t):
        if last_out is not None and ti < last_out:
            continue
        heapq.heappush(heap, (ti, i))
        newest = ti if newest is None else max(newest, ti)
        while heap and heap[0][0] <= newest - LENIENT_LOOKAHEAD_US:
            ti_out, j = heapq.heappop(heap)
            out.append(j)
            last_out = ti_out
    while heap:
        out.append(heapq.heappop(heap)[1])
    return np.asarray(out, dtype=np.int64)


def parse_events(data, geometry, fmt="text", time_unit="s", strict=True):
    """Decode an event stream from bytes.

    Args:
        data: raw bytes (or a binary file object).
        geometry: sensor size used for bounds checks.
        fmt: ``"text"`` (lines ``t x y p``) or ``"binary"`` (EVT1 records).
        time_unit: for text input, ``"s"`` for decimal seconds or ``"us"``
            for integer microseconds.
        strict: raise on decreasing timestamps instead of reordering
            within a 1 ms lookahead buffer.
    """
    if hasattr(data, "read"):
        data = data.read()
    if fmt == "text":
        if isinstance(data, bytes):
            data = data.decode("ascii")
        if time_unit not in ("s", "us"):
            raise ValueError(f"unknown time unit {time_unit!r}")
        t, x, y, p = _parse_text_lines(data, time_unit)
        t = np.asarray(t, dtype=np.int64)
        x = np.asarray(x, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        p = np.asarray(p, dtype=np.int8)
    elif fmt == "binary":
        t, x, y, p = _decode_binary(data, geometry)
    else:
        raise ValueError(f"unknown event format {fmt!r}")

    check_bounds(x, y, geometry)
    if len(t) > 1 and np.any(np.diff(t) < 0):
        if strict:
            i = int(np.flatnonzero(np.diff(t) < 0)[0]) + 1
            raise NonMonotoneTimestamp(f"event {i} has t={int(t[i])} < previous t={int(t[i - 1])}")
        keep = _lenient_order(t.tolist())
        t, x, y, p = t[keep], x[keep], y[keep], p[keep]
    return EventStream(t, x, y, p, geometry)


def _decode_binary(data, geometry):
    if len(data) < BINARY_HEADER.size:
        raise CorruptHeader("binary event file shorter than its header")
    magic, w, h, count = BINARY_HEADER.unpack_from(data, 0)
    if magic != BINARY_MAGIC:
        raise CorruptHeader(f"bad magic {magic!r}")
    if (w, h) != (geometry.w, geometry.h):
        raise CorruptHeader(f"file sensor {w}x{h} does not match {geometry.w}x{geometry.h}")
    body = len(data) - BINARY_HEADER.size
    if body != count * BINARY_RECORD.itemsize:
        raise CorruptHeader(f"header declares {count} events but body holds {body} bytes")
    rec = np.frombuffer(data, dtype=BINARY_RECORD, count=count, offset=BINARY_HEADER.size)
    p = rec["p"].astype(np.int8)
    if not np.all(np.isin(p, (-1, 1))):
        raise MalformedLine("binary record with polarity outside {+1, -1}")
    return (
        rec["t"].astype(np.int64), rec["x"].astype(np.int64),
        rec["y"].astype(np.int64), p,
    )


def encode_events(stream, fmt="text", time_unit="s"):
    """Serialize a stream; inverse of :func:`parse_events`."""
    if fmt == "binary":
        rec = np.zeros(len(stream), dtype=BINARY_RECORD)
        rec["t"] = stream.t
        rec["x"] = stream.x
        rec["y"] = stream.y
        rec["p"] = stream.p
        header = BINARY_HEADER.pack(BINARY_MAGIC, stream.geometry.w, stream.geometry.h, len(stream))
        return header + rec.tobytes()
    if fmt != "text":
        raise ValueError(f"unknown event format {fmt!r}")
    buf = io.StringIO()
    for t, x, y, p in zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist()):
        ts = f"{t // 1_000_000}.{t % 1_000_000:06d}" if time_unit == "s" else str(t)
        buf.write(f"{ts} {x} {y} {p}\n")
    return buf.getvalue().encode("ascii")


def read_events(path, geometry, fmt=None, time_unit="s", strict=True):
    path = os.fspath(path)
    if fmt is None:
        fmt = "binary" if path.endswith((".bin", ".evt")) else "text"
    with open(path, "rb") as fh:
        return parse_events(fh.read(), geometry, fmt=fmt, time_unit=time_unit, strict=strict)


def write_events(stream, path, fmt=None, time_unit="s"):
    path = os.fspath(path)
    if fmt is None:
        fmt = "binary" if path.endswith((".bin", ".evt")) else "text"
    with open(path, "wb") as fh:
        fh.write(encode_events(stream, fmt=fmt, time_unit=time_unit))


# -------------------------------------------------------------- windowing


def window_by_count(stream, n):
    """Split into consecutive windows of exactly ``n`` events.

    The trailing remainder (fewer than ``n`` events) is dropped.
    """
    if n < 1:
        raise ValueError("window size must be >= 1")
    count = len(stream) // n
    return [EventWindow(stream[k * n:(k + 1) * n], k) for k in range(count)]


def window_by_duration(stream, dt_us):
    """Split into half-open time bins ``[t0 + k*dt, t0 + (k+1)*dt)``.

    Empty bins produce no window; ``k`` numbers the emitted windows.
    """
    if dt_us < 1:
        raise ValueError("window duration must be >= 1 us")
    if len(stream) == 0:
        return []
    b = (stream.t - stream.t[0]) // int(dt_us)
    cuts = np.flatnonzero(np.diff(b)) + 1
    bounds = [0, *cuts.tolist(), len(stream)]
    return [EventWindow(stream[s:e], k) for k, (s, e) in enumerate(zip(bounds[:-1], bounds[1:]))]


# --------------------------------------------------------- representations


def accumulate_frame(window, geometry):
    ev = window.events
    check_bounds(ev.x, ev.y, geometry)
    flat = ev.y.astype(np.int64) * geometry.w + ev.x
    counts = np.bincount(flat, weights=ev.p.astype(np.float64), minlength=geometry.w * geometry.h)
    return EventFrame(np.rint(counts).astype(np.int64).reshape(geometry.shape))


def normalized_timestamps(t, bins):
    """Map timestamps onto ``[0, bins-1]``; a zero span maps everything to 0."""
    t = np.asarray(t, dtype=np.int64)
    span = int(t[-1] - t[0]) if len(t) else 0
    if span == 0 or bins == 1:
        return np.zeros(len(t), dtype=np.float64)
    return (bins - 1) * (t - t[0]).astype(np.float64) / span


def encode_voxel_grid(window, geometry, bins=DEFAULT_BINS):
    """Temporal voxel grid: each event splits its polarity between the two
    nearest bins with linear (tent) weights."""
    if bins < 1:
        raise ValueError("bin count must be >= 1")
    ev = window.events
    check_bounds(ev.x, ev.y, geometry)
    ts = normalized_timestamps(ev.t, bins)
    lo = np.floor(ts).astype(np.int64)
    frac = ts - lo
    pol = ev.p.astype(np.float64)
    pix = ev.y.astype(np.int64) * geometry.w + ev.x
    npix = geometry.w * geometry.h

    idx = [lo * npix + pix]
    wts = [pol * (1.0 - frac)]
    right = lo + 1 < bins
    idx.append((lo[right] + 1) * npix + pix[right])
    wts.append(pol[right] * frac[right])
    grid = np.bincount(np.concatenate(idx), weights=np.concatenate(wts), minlength=bins * npix)
    return VoxelGrid(grid.reshape(bins, geometry.h, geometry.w), bins, window.duration)
