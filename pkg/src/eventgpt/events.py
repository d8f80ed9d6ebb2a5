"""Event streams, voxel-grid binning, frame rendering and the ``EVST`` binary format."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"EVST"
VERSION = 1
_HEADER = struct.Struct("<4sHHHQ")
RECORD_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "u1")])


class InvalidWindowError(ValueError):
    pass


class EventFormatError(ValueError):
    """Malformed event file; ``offset`` is the byte where decoding failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    p: int


class EventStream:
    """Timestamp-sorted events from a ``width`` x ``height`` sensor.

    Stored column-wise: ``t`` (uint64 microseconds), ``x``/``y`` (uint16),
    ``p`` (int8, +1 or -1).
    """

    def __init__(self, width: int, height: int, t=(), x=(), y=(), p=(), *, validate: bool = True):
        self.width = int(width)
        self.height = int(height)
        self.t = np.ascontiguousarray(t, dtype=np.uint64)
        self.x = np.ascontiguousarray(x, dtype=np.uint16)
        self.y = np.ascontiguousarray(y, dtype=np.uint16)
        self.p = np.ascontiguousarray(p, dtype=np.int8)
        for a in (self.t, self.x, self.y, self.p):
            a.flags.writeable = False
        if validate:
            self._validate()

    def _validate(self) -> None:
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns have different lengths")
        if not (0 < self.width < 65536 and 0 < self.height < 65536):
            raise ValueError(f"bad sensor size {self.width}x{self.height}")
        if n == 0:
            return
        if (self.x >= self.width).any() or (self.y >= self.height).any():
            raise ValueError("event coordinates outside the sensor")
        if not np.isin(self.p, (-1, 1)).all():
            raise ValueError("polarity must be +1 or -1")
        if (self.t[1:] < self.t[:-1]).any():
            raise ValueError("events are not sorted by timestamp")

    @classmethod
    def from_events(cls, width: int, height: int, events) -> "EventStream":
        events = sorted(events, key=lambda e: e.t)
        return cls(width, height, [e.t for e in events], [e.x for e in events],
                   [e.y for e in events], [e.p for e in events])

    @classmethod
    def from_unsorted(cls, width, height, t, x, y, p) -> "EventStream":
        order = np.argsort(np.asarray(t, dtype=np.uint64), kind="stable")
        return cls(width, height, np.asarray(t)[order], np.asarray(x)[order],
                   np.asarray(y)[order], np.asarray(p)[order])

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self):
        for i in range(len(self)):
            yield Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and all(
            np.array_equal(a, b) for a, b in
            ((self.t, other.t), (self.x, other.x), (self.y, other.y), (self.p, other.p))
        )

    @property
    def duration(self) -> int:
        return int(self.t[-1]) if len(self) else 0


@dataclass(frozen=True)
class VoxelGrid:
    """``[T, 2, H, W]`` per-bin polarity counts; channel 0 is p=+1, channel 1 is p=-1."""

    data: np.ndarray

    @property
    def num_bins(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]


def _window_mask(s: EventStream, t0: int, t1: int) -> np.ndarray:
    if t1 <= t0:
        raise InvalidWindowError(f"window end {t1} must be after start {t0}")
    if t0 < 0:
        raise InvalidWindowError(f"window start {t0} is negative")
    return (s.t >= np.uint64(t0)) & (s.t <= np.uint64(min(t1, 2**64 - 1)))


def bin_indices(t: np.ndarray, t0: int, t1: int, num_bins: int) -> np.ndarray:
    """Bin of each in-window timestamp; the closing edge ``t1`` folds into the last bin."""
    rel = np.asarray(t, dtype=np.uint64) - np.uint64(t0)
    if (t1 - t0) * num_bins < 2**63:
        b = (rel.astype(np.int64) * num_bins) // (t1 - t0)
    else:
        # exact integer arithmetic for spans too wide for int64 products
        b = np.array([int(r) * num_bins // (t1 - t0) for r in rel], dtype=np.int64)
    return np.minimum(b, num_bins - 1)


def bin_events(s: EventStream, t0: int, t1: int, num_bins: int) -> VoxelGrid:
    """Count events per (bin, polarity, y, x) over ``[t0, t1]``."""
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    keep = _window_mask(s, t0, t1)
    grid = np.zeros((num_bins, 2, s.height, s.width), dtype=np.float64)
    if keep.any():
        b = bin_indices(s.t[keep], t0, t1, num_bins)
        ch = (s.p[keep] < 0).astype(np.int64)
        np.add.at(grid, (b, ch, s.y[keep].astype(np.int64), s.x[keep].astype(np.int64)), 1.0)
    return VoxelGrid(grid)


def normalize_grid(g: VoxelGrid) -> VoxelGrid:
    """Divide each bin by ``max(1, its largest count)`` so entries lie in [0, 1]."""
    peak = g.data.reshape(g.num_bins, -1).max(axis=1) if g.data.size else np.zeros(g.num_bins)
    return VoxelGrid(g.data / np.maximum(1.0, peak)[:, None, None, None])


def signed_accumulation(s: EventStream, t0: int, t1: int) -> np.ndarray:
    keep = _window_mask(s, t0, t1)
    acc = np.zeros((s.height, s.width), dtype=np.int64)
    np.add.at(acc, (s.y[keep].astype(np.int64), s.x[keep].astype(np.int64)), s.p[keep].astype(np.int64))
    return acc


def render_frame(s: EventStream, t0: int, t1: int) -> np.ndarray:
    """uint8 image of per-pixel polarity sums; zero sits at 128, the largest |sum| at 0/255."""
    acc = signed_accumulation(s, t0, t1)
    peak = int(np.abs(acc).max()) if acc.size else 0
    if peak == 0:
        return np.full(acc.shape, 128, dtype=np.uint8)
    img = 128.0 + acc * (127.0 / peak)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)


def encode_stream(s: EventStream) -> bytes:
    rec = np.zeros(len(s), dtype=RECORD_DTYPE)
    rec["t"], rec["x"], rec["y"], rec["p"] = s.t, s.x, s.y, s.p
    return _HEADER.pack(MAGIC, VERSION, s.width, s.height, len(s)) + rec.tobytes()


def decode_stream(buf: bytes) -> EventStream:
    if len(buf) < _HEADER.size:
        raise EventFormatError("truncated header", len(buf))
    magic, version, width, height, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise EventFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise EventFormatError(f"unsupported version {version}", 4)
    if width == 0 or height == 0:
        raise EventFormatError("zero sensor dimension", 6)
    body = len(buf) - _HEADER.size
    need = count * RECORD_DTYPE.itemsize
    if body < need:
        raise EventFormatError(f"truncated body: {count} records need {need} bytes, have {body}", len(buf))
    if body > need:
        raise EventFormatError("trailing bytes after last record", _HEADER.size + need)
    rec = np.frombuffer(buf, dtype=RECORD_DTYPE, count=count, offset=_HEADER.size)

    def first_bad(mask, field_offset):
        i = int(np.argmax(mask))
        return _HEADER.size + i * RECORD_DTYPE.itemsize + field_offset

    if count:
        for name, limit, off in (("x", width, 8), ("y", height, 10)):
            bad = rec[name] >= limit
            if bad.any():
                raise EventFormatError(f"{name} coordinate out of range", first_bad(bad, off))
        bad = (rec["p"] != 1) & (rec["p"] != -1)
        if bad.any():
            raise EventFormatError("polarity not in {-1, +1}", first_bad(bad, 12))
        bad = np.zeros(count, dtype=bool)
        bad[1:] = rec["t"][1:] < rec["t"][:-1]
        if bad.any():
            raise EventFormatError("timestamps not sorted", first_bad(bad, 0))
    return EventStream(width, height, rec["t"], rec["x"], rec["y"], rec["p"], validate=False)


def write_stream(path: str | os.PathLike, s: EventStream) -> None:
    Path(path).write_bytes(encode_stream(s))


def read_stream(path: str | os.PathLike) -> EventStream:
    return decode_stream(Path(path).read_bytes())
