"""Event streams and the binary event file format.

File layout (little-endian): a 16-byte header ``b"EVT1"``, u32 version,
u32 width, u32 height, followed by packed 13-byte records
``(t: u64 microseconds, x: u16, y: u16, p: i8)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import FormatError

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
MAGIC = b"EVT1"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(eq=False)
class EventStream:
    records: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.records = np.asarray(self.records, dtype=EVENT_DTYPE)

    @classmethod
    def empty(cls, width, height):
        return cls(np.zeros(0, dtype=EVENT_DTYPE), width, height)

    @classmethod
    def from_arrays(cls, t, x, y, p, width, height, sort=True):
        rec = np.zeros(len(t), dtype=EVENT_DTYPE)
        rec["t"], rec["x"], rec["y"], rec["p"] = t, x, y, p
        if sort:
            rec = rec[np.argsort(rec["t"], kind="stable")]
        return cls(rec, width, height)

    def __len__(self):
        return len(self.records)

    @property
    def t(self):
        return self.records["t"]

    @property
    def x(self):
        return self.records["x"]

    @property
    def y(self):
        return self.records["y"]

    @property
    def p(self):
        return self.records["p"]

    def slice_time(self, t_start, t_end):
        """Events with ``t_start <= t < t_end`` (requires sorted timestamps)."""
        t = self.records["t"]
        lo = np.searchsorted(t, t_start, side="left")
        hi = np.searchsorted(t, t_end, side="left")
        return EventStream(self.records[lo:hi], self.width, self.height)

    def filter(self, mask):
        return EventStream(self.records[mask], self.width, self.height)

    def shifted(self, dt):
        rec = self.records.copy()
        rec["t"] = (rec["t"].astype(np.int64) + int(dt)).astype(np.uint64)
        return EventStream(rec, self.width, self.height)

    def is_valid(self):
        r = self.records
        return bool(np.all(np.diff(r["t"].astype(np.int64)) >= 0)
                    and np.all(r["x"] < self.width) and np.all(r["y"] < self.height)
                    and np.all(np.abs(r["p"]) == 1))

    def counts(self):
        """Per-pixel (positive, negative) event counts, each (H, W)."""
        pos = np.zeros((self.height, self.width), np.int64)
        neg = np.zeros((self.height, self.width), np.int64)
        r = self.records
        m = r["p"] > 0
        np.add.at(pos, (r["y"][m], r["x"][m]), 1)
        np.add.at(neg, (r["y"][~m], r["x"][~m]), 1)
        return pos, neg


def concatenate(streams, width=None, height=None):
    streams = list(streams)
    if not streams:
        return EventStream.empty(width or 0, height or 0)
    rec = np.concatenate([s.records for s in streams])
    rec = rec[np.argsort(rec["t"], kind="stable")]
    return EventStream(rec, streams[0].width, streams[0].height)


def write_events(path, stream):
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, stream.width, stream.height))
        f.write(stream.records.astype(EVENT_DTYPE, copy=False).tobytes())


def read_events(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", path)
    magic, version, width, height = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", path)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", path)
    body = data[_HEADER.size:]
    if len(body) % EVENT_DTYPE.itemsize:
        raise FormatError("record section is not a whole number of events", path)
    rec = np.frombuffer(body, dtype=EVENT_DTYPE).copy()
    return EventStream(rec, width, height)
