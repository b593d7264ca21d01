"""Event data model and the ``evt1`` on-disk formats.

An :class:`EventStream` stores its events column-wise in read-only numpy
arrays (``t`` int64 microseconds, ``x``/``y`` int32, ``p`` int8). Streams are
immutable once built, so they can be shared freely between threads.

Two file encodings exist and round-trip identically:

* text: a header line ``# evt1 <width> <height>`` followed by one
  ``t_us,x,y,p`` record per line;
* binary: magic ``EVT1``, ``u16 width``, ``u16 height`` and packed
  little-endian records ``(u64 t_us, u16 x, u16 y, i8 p)``.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from evtlight._io import atomic_write_bytes, atomic_write_text

SENSOR_WIDTH = 304
SENSOR_HEIGHT = 240

ON = 1
OFF = -1

BINARY_MAGIC = b"EVT1"
TEXT_MAGIC = "# evt1"
RECORD_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
_BINARY_SUFFIXES = {".evtb", ".bin", ".evt1b"}


class EventFormatError(ValueError):
    """Raised when an event file cannot be parsed or holds an invalid stream."""


@dataclass(frozen=True)
class Event:
    """One change event: pixel ``(x, y)``, timestamp ``t`` in µs and polarity ``p``."""

    x: int
    y: int
    t: int
    p: int


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


class EventStream:
    """Time-ordered sequence of events from one sensor geometry.

    The constructor does not validate; use :func:`validate_stream` for a
    report, or :meth:`checked` to raise on the first problem.
    """

    __slots__ = ("t", "x", "y", "p", "width", "height")

    def __init__(self, t, x, y, p, width: int = SENSOR_WIDTH, height: int = SENSOR_HEIGHT):
        self.t = _frozen(t, np.int64)
        self.x = _frozen(x, np.int32)
        self.y = _frozen(y, np.int32)
        self.p = _frozen(p, np.int8)
        if not (len(self.t) == len(self.x) == len(self.y) == len(self.p)):
            raise ValueError("event columns must have equal length")
        self.width = int(width)
        self.height = int(height)

    @classmethod
    def empty(cls, width: int = SENSOR_WIDTH, height: int = SENSOR_HEIGHT) -> "EventStream":
        return cls([], [], [], [], width, height)

    @classmethod
    def from_events(
        cls, events: Iterable[Event], width: int = SENSOR_WIDTH, height: int = SENSOR_HEIGHT
    ) -> "EventStream":
        events = list(events)
        return cls(
            [e.t for e in events],
            [e.x for e in events],
            [e.y for e in events],
            [e.p for e in events],
            width,
            height,
        )

    @property
    def geometry(self) -> tuple[int, int]:
        return self.width, self.height

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for t, x, y, p in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(x, y, t, p)

    def __getitem__(self, key):
        if isinstance(key, (int, np.integer)):
            return Event(int(self.x[key]), int(self.y[key]), int(self.t[key]), int(self.p[key]))
        return EventStream(self.t[key], self.x[key], self.y[key], self.p[key], self.width, self.height)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    def __repr__(self) -> str:
        span = f", t=[{self.t[0]}..{self.t[-1]}]" if len(self) else ""
        return f"EventStream(n={len(self)}, geometry={self.width}x{self.height}{span})"

    @property
    def pixel_index(self) -> np.ndarray:
        """Flat pixel index ``y * width + x`` of every event."""
        return self.y.astype(np.int64) * self.width + self.x

    def select(self, mask_or_index) -> "EventStream":
        return self[np.asarray(mask_or_index)]

    def shifted(self, dt: int) -> "EventStream":
        """Copy with every timestamp moved by ``dt`` µs."""
        return EventStream(self.t + int(dt), self.x, self.y, self.p, self.width, self.height)

    def checked(self) -> "EventStream":
        report = validate_stream(self)
        if not report.ok:
            raise EventFormatError(str(report.violations[0]))
        return self

    def to_records(self) -> np.ndarray:
        rec = np.empty(len(self), dtype=RECORD_DTYPE)
        rec["t"] = self.t
        rec["x"] = self.x
        rec["y"] = self.y
        rec["p"] = self.p
        return rec

    @staticmethod
    def concatenate(streams: Sequence["EventStream"]) -> "EventStream":
        """Merge streams by timestamp; ties keep stream order, then in-stream order."""
        if not streams:
            return EventStream.empty()
        width, height = streams[0].geometry
        t = np.concatenate([s.t for s in streams])
        order = np.argsort(t, kind="stable")
        cat = lambda name: np.concatenate([getattr(s, name) for s in streams])[order]
        return EventStream(t[order], cat("x"), cat("y"), cat("p"), width, height)


@dataclass(frozen=True)
class Violation:
    index: int
    kind: str
    message: str

    def __str__(self) -> str:
        return self.message


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_stream(stream: EventStream) -> ValidationReport:
    """List every ordering, bounds and polarity violation, by event index."""
    found: list[tuple[int, int, Violation]] = []
    t, x, y, p = stream.t, stream.x, stream.y, stream.p

    for i in np.flatnonzero(np.diff(t) < 0) + 1:
        found.append((int(i), 0, Violation(int(i), "order", f"non-monotonic at index {i}")))
    for i in np.flatnonzero(t < 0):
        found.append((int(i), 1, Violation(int(i), "time", f"negative timestamp at index {i}")))
    bad_x = (x < 0) | (x >= stream.width)
    bad_y = (y < 0) | (y >= stream.height)
    for i in np.flatnonzero(bad_x | bad_y):
        found.append(
            (
                int(i),
                2,
                Violation(
                    int(i),
                    "bounds",
                    f"out of bounds at index {i}: ({x[i]}, {y[i]}) "
                    f"outside {stream.width}x{stream.height}",
                ),
            )
        )
    for i in np.flatnonzero((p != ON) & (p != OFF)):
        found.append((int(i), 3, Violation(int(i), "polarity", f"bad polarity {p[i]} at index {i}")))

    found.sort(key=lambda item: (item[0], item[1]))
    return ValidationReport([v for _, _, v in found])


def _is_binary_path(path: Path) -> bool:
    return path.suffix.lower() in _BINARY_SUFFIXES


def write_events(stream: EventStream, path: str | os.PathLike, binary: bool | None = None) -> int:
    """Write ``stream`` to ``path`` and return the record count.

    ``binary=None`` picks the binary form for ``.evtb``/``.evt1b``/``.bin``
    suffixes and text otherwise.
    """
    path = Path(path)
    stream.checked()
    if binary is None:
        binary = _is_binary_path(path)
    try:
        if binary:
            header = BINARY_MAGIC + struct.pack("<HH", stream.width, stream.height)
            atomic_write_bytes(path, header + stream.to_records().tobytes())
        else:
            lines = [f"{TEXT_MAGIC} {stream.width} {stream.height}"]
            lines.extend(
                f"{t},{x},{y},{p}"
                for t, x, y, p in zip(
                    stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist()
                )
            )
            atomic_write_text(path, "\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write events to {path}: {exc}") from exc
    return len(stream)


def _parse_text_slow(body_lines: list[str], first_line_no: int, path: Path) -> np.ndarray:
    rows = []
    for offset, raw in enumerate(body_lines):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        try:
            if len(parts) != 4:
                raise ValueError(f"expected 4 fields, got {len(parts)}")
            rows.append([int(v) for v in parts])
        except ValueError as exc:
            raise EventFormatError(
                f"{path}:{first_line_no + offset}: malformed record {line!r} ({exc})"
            ) from None
    return np.array(rows, dtype=np.int64).reshape(-1, 4)


def _read_text(raw: bytes, path: Path) -> EventStream:
    text = raw.decode("utf-8", errors="replace")
    lines = text.splitlines()
    if not lines:
        raise EventFormatError(f"{path}:1: missing '{TEXT_MAGIC}' header")
    head = lines[0].split()
    if len(head) != 4 or " ".join(head[:2]) != TEXT_MAGIC:
        raise EventFormatError(f"{path}:1: bad header {lines[0]!r}")
    try:
        width, height = int(head[2]), int(head[3])
    except ValueError:
        raise EventFormatError(f"{path}:1: bad geometry in header {lines[0]!r}") from None
    body = lines[1:]
    data = None
    if any(line.strip() for line in body):
        try:
            data = np.loadtxt(io.StringIO("\n".join(body)), delimiter=",", dtype=np.int64, ndmin=2)
            if data.shape[1] != 4:
                data = None
        except ValueError:
            data = None
        if data is None:
            data = _parse_text_slow(body, 2, path)
    else:
        data = np.zeros((0, 4), dtype=np.int64)
    return EventStream(data[:, 0], data[:, 1], data[:, 2], data[:, 3], width, height)


def _read_binary(raw: bytes, path: Path) -> EventStream:
    if len(raw) < 8:
        raise EventFormatError(f"{path}: offset 0: truncated header")
    width, height = struct.unpack("<HH", raw[4:8])
    payload = raw[8:]
    if len(payload) % RECORD_DTYPE.itemsize:
        whole = len(payload) // RECORD_DTYPE.itemsize
        raise EventFormatError(
            f"{path}: offset {8 + whole * RECORD_DTYPE.itemsize}: truncated record {whole}"
        )
    rec = np.frombuffer(payload, dtype=RECORD_DTYPE)
    if len(rec) and int(rec["t"].max()) > np.iinfo(np.int64).max:
        raise EventFormatError(f"{path}: timestamp overflows int64")
    return EventStream(
        rec["t"].astype(np.int64), rec["x"], rec["y"], rec["p"], width, height
    )


def read_events(path: str | os.PathLike) -> EventStream:
    """Read an event file in either encoding (sniffed from the magic bytes).

    Raises:
        EventFormatError: on malformed records (with line or byte offset) and
            on streams that fail :func:`validate_stream`.
    """
    path = Path(path)
    raw = path.read_bytes()
    stream = _read_binary(raw, path) if raw[:4] == BINARY_MAGIC else _read_text(raw, path)
    report = validate_stream(stream)
    if not report.ok:
        raise EventFormatError(f"{path}: {report.violations[0]}")
    return stream
