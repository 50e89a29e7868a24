"""Event stream parsing, serialization, and time/count windowing.

Streams hold (x, y, t, p) records: pixel coordinates, a microsecond
timestamp, and a binary polarity (0 = OFF, 1 = ON). Two on-disk formats
are supported:

* Text: UTF-8, one ``t,x,y,p`` record per line, ``#`` comments allowed,
  optional single header line.
* Binary: magic ``EVPR``, version u16 LE, width u16 LE, height u16 LE,
  record count u64 LE, then 16-byte packed records
  (t u64 LE, x u16 LE, y u16 LE, p u8, pad u8, u16 zero).
  Write/parse round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Literal

import numpy as np

from .errors import (
    BadMagic,
    CoordinateOutOfRange,
    MalformedLine,
    NonMonotoneTimestamp,
    TruncatedRecord,
    VersionUnsupported,
)

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])

_FILE_MAGIC = b"EVPR"
_FILE_VERSION = 1
_FILE_HEADER = struct.Struct("<4sHHHQ")
_RECORD_DTYPE = np.dtype(
    [("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "u1"), ("zero", "<u2")]
)


def make_events(t, x, y, p) -> np.ndarray:
    """Pack parallel sequences into an event record array."""
    ev = np.empty(len(t), dtype=EVENT_DTYPE)
    ev["t"] = t
    ev["x"] = x
    ev["y"] = y
    ev["p"] = p
    return ev


@dataclass(frozen=True)
class EventStream:
    """An ordered event sequence plus the sensor geometry that produced it.

    ``geometry`` is (sensor_width, sensor_height). Events are non-decreasing
    in t; loaders sort stably on ingest unless strict mode rejects disorder.
    """

    geometry: tuple[int, int]
    events: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=EVENT_DTYPE))

    def __post_init__(self):
        w, h = self.geometry
        if w <= 0 or h <= 0:
            raise ValueError(f"invalid sensor geometry {self.geometry}")
        if self.events.dtype != EVENT_DTYPE:
            raise ValueError("events must use EVENT_DTYPE records")

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class WindowingPolicy:
    """How to slice a stream into frames.

    mode "time": ``length`` is the accumulation window in microseconds.
    mode "count": ``length`` is the number of events per frame.
    ``stride`` defaults to the window length (non-overlapping windows).
    """

    mode: Literal["time", "count"]
    length: int
    stride: int | None = None

    def __post_init__(self):
        if self.mode not in ("time", "count"):
            raise ValueError(f"unknown windowing mode {self.mode!r}")
        if self.length <= 0:
            raise ValueError("window length must be positive")
        if self.stride is not None and self.stride <= 0:
            raise ValueError("stride must be positive")

    @property
    def effective_stride(self) -> int:
        return self.length if self.stride is None else self.stride


@dataclass(frozen=True)
class EventWindow:
    """One accumulation window.

    For time windows, t_min/t_max are the nominal bounds [start, start + dt]
    regardless of where events actually fall; for count windows they are the
    first/last event timestamps. Event records are a view into the parent
    stream and preserve stream order.
    """

    t_min: int
    t_max: int
    events: np.ndarray
    index: int

    def __len__(self) -> int:
        return len(self.events)


def _parse_line(line_no: int, line: str, width: int, height: int):
    parts = line.split(",")
    if len(parts) != 4:
        raise MalformedLine(line_no, f"expected 4 fields, got {len(parts)}")
    try:
        t, x, y, p = (int(s) for s in parts)
    except ValueError:
        raise MalformedLine(line_no, "non-integer field") from None
    if t < 0:
        raise MalformedLine(line_no, "negative timestamp")
    if p not in (0, 1):
        raise MalformedLine(line_no, f"polarity {p} not in {{0,1}}")
    if not (0 <= x < width) or not (0 <= y < height):
        raise CoordinateOutOfRange(line_no, f"({x},{y}) vs {width}x{height}")
    return t, x, y, p


def parse_text(path: str, geometry: tuple[int, int], *, has_header: bool = False,
               strict: bool = False) -> EventStream:
    """Parse a ``t,x,y,p`` text file into an EventStream.

    Blank lines and ``#`` comments are skipped. In strict mode a decreasing
    timestamp raises NonMonotoneTimestamp; otherwise events are stably
    sorted by t after loading (ties keep file order).
    """
    width, height = geometry
    ts: list[int] = []
    xs: list[int] = []
    ys: list[int] = []
    ps: list[int] = []
    prev_t = -1
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            if has_header and line_no == 1:
                continue
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            t, x, y, p = _parse_line(line_no, line, width, height)
            if strict and t < prev_t:
                raise NonMonotoneTimestamp(line_no)
            prev_t = t
            ts.append(t)
            xs.append(x)
            ys.append(y)
            ps.append(p)
    events = make_events(ts, xs, ys, ps)
    if not strict and len(events) > 1:
        events = events[np.argsort(events["t"], kind="stable")]
    return EventStream(geometry=geometry, events=events)


def write_text(stream: EventStream, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in stream.events:
            fh.write(f"{ev['t']},{ev['x']},{ev['y']},{ev['p']}\n")


def parse_binary(path: str, *, strict: bool = False) -> EventStream:
    """Parse the packed binary stream format (see module docstring)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _FILE_MAGIC:
        raise BadMagic(f"expected {_FILE_MAGIC!r} magic in {path}")
    if len(data) < _FILE_HEADER.size:
        raise TruncatedRecord("binary header truncated")
    _, version, width, height, count = _FILE_HEADER.unpack_from(data)
    if version != _FILE_VERSION:
        raise VersionUnsupported(f"format version {version}, supported: {_FILE_VERSION}")
    payload = data[_FILE_HEADER.size:]
    if len(payload) != count * _RECORD_DTYPE.itemsize:
        raise TruncatedRecord(
            f"expected {count * _RECORD_DTYPE.itemsize} payload bytes, got {len(payload)}")
    records = np.frombuffer(payload, dtype=_RECORD_DTYPE)
    bad_p = records["p"] > 1
    if bad_p.any():
        raise MalformedLine(int(np.argmax(bad_p)) + 1, "polarity not in {0,1}")
    bad_xy = (records["x"] >= width) | (records["y"] >= height)
    if bad_xy.any():
        raise CoordinateOutOfRange(int(np.argmax(bad_xy)) + 1)
    events = make_events(records["t"], records["x"], records["y"], records["p"])
    if strict:
        if len(events) > 1 and np.any(np.diff(events["t"].astype(np.int64)) < 0):
            first = int(np.argmax(np.diff(events["t"].astype(np.int64)) < 0)) + 2
            raise NonMonotoneTimestamp(first)
    elif len(events) > 1:
        events = events[np.argsort(events["t"], kind="stable")]
    return EventStream(geometry=(int(width), int(height)), events=events)


def write_binary(stream: EventStream, path: str) -> None:
    """Serialize a stream to the packed binary format (bit-exact round-trip)."""
    records = np.zeros(len(stream.events), dtype=_RECORD_DTYPE)
    for name in ("t", "x", "y", "p"):
        records[name] = stream.events[name]
    header = _FILE_HEADER.pack(_FILE_MAGIC, _FILE_VERSION,
                               stream.geometry[0], stream.geometry[1], len(records))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())


def load_stream(path: str, geometry: tuple[int, int] | None = None, *,
                strict: bool = False, has_header: bool = False) -> EventStream:
    """Load either format: binary when the file starts with the magic bytes."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == _FILE_MAGIC:
        return parse_binary(path, strict=strict)
    if geometry is None:
        raise ValueError("sensor geometry required for text event files")
    return parse_text(path, geometry, strict=strict, has_header=has_header)


def window_stream(stream: EventStream, policy: WindowingPolicy) -> list[EventWindow]:
    """Slice a stream into windows according to ``policy``.

    Time mode: window i covers [t0 + i*stride, t0 + i*stride + length) with
    t0 the first event's timestamp; empty and final partial windows are
    emitted. Count mode: runs of ``length`` events every ``stride`` events,
    final partial run emitted. An empty stream yields zero windows.
    """
    events = stream.events
    if len(events) == 0:
        return []
    t = events["t"]
    if len(events) > 1 and np.any(np.diff(t.astype(np.int64)) < 0):
        order = np.argsort(t, kind="stable")
        events = events[order]
        t = events["t"]

    stride = policy.effective_stride
    windows: list[EventWindow] = []
    if policy.mode == "time":
        t0 = int(t[0])
        t_last = int(t[-1])
        n_windows = (t_last - t0) // stride + 1
        for i in range(n_windows):
            start = t0 + i * stride
            stop = start + policy.length
            lo, hi = np.searchsorted(t, [start, stop], side="left")
            windows.append(EventWindow(t_min=start, t_max=stop,
                                       events=events[lo:hi], index=i))
    else:
        n = len(events)
        i = 0
        while i * stride < n:
            chunk = events[i * stride: i * stride + policy.length]
            windows.append(EventWindow(t_min=int(chunk["t"][0]), t_max=int(chunk["t"][-1]),
                                       events=chunk, index=i))
            i += 1
    return windows


def iter_windows(stream: EventStream, policy: WindowingPolicy) -> Iterator[EventWindow]:
    yield from window_stream(stream, policy)
