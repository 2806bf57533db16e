"""Photon time-tag streams and their on-disk formats.

A stream is a sorted array of integer tick counts on one channel. Two file
formats are supported:

* ``.ptag`` binary: 16-byte header (magic ``PTAG``, u16 version, u16 channel,
  u64 resolution in ps), u64 span in ticks, then one u64 tick per event. All
  little-endian.
* CSV: ``#``-prefixed ``key=value`` header lines followed by one tick per line.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "MAGIC",
    "VERSION",
    "StreamFormatError",
    "StreamStats",
    "TimeTagStream",
    "read_stream",
    "stats",
    "write_stream",
]

MAGIC = b"PTAG"
VERSION = 1
_HEADER = struct.Struct("<4sHHQ")
_SPAN = struct.Struct("<Q")
_MAX_TICK = 2**63 - 1  # kernels view ticks as int64


class StreamFormatError(ValueError):
    """Raised for malformed, unsorted or out-of-range time-tag data."""


def _as_ticks(ticks) -> np.ndarray:
    arr = np.asarray(ticks)
    if arr.dtype != np.uint64:
        if arr.size and np.issubdtype(arr.dtype, np.signedinteger) and arr.min() < 0:
            raise StreamFormatError("negative tick value")
        arr = arr.astype(np.uint64)
    return np.ascontiguousarray(arr)


@dataclass(frozen=True, eq=False)
class TimeTagStream:
    """Immutable sorted photon arrival times on a single channel.

    Attributes:
        ticks: Non-decreasing ``uint64`` tick counts.
        span_ticks: Observation duration in ticks; every tick lies in ``[0, span_ticks]``.
        resolution_ps: Picoseconds per tick.
        channel: Small integer channel identifier.
    """

    ticks: np.ndarray
    span_ticks: int
    resolution_ps: int = 1
    channel: int = 0

    def __post_init__(self):
        ticks = _as_ticks(self.ticks)
        span = int(self.span_ticks)
        res = int(self.resolution_ps)
        if res <= 0:
            raise StreamFormatError("resolution_ps must be positive")
        if span <= 0:
            raise StreamFormatError("span_ticks must be positive")
        if span > _MAX_TICK:
            raise StreamFormatError("span overflow: span_ticks exceeds 2**63 - 1")
        if not 0 <= int(self.channel) < 2**16:
            raise StreamFormatError("channel must fit in 16 bits")
        if ticks.ndim != 1:
            raise StreamFormatError("ticks must be one-dimensional")
        if ticks.size:
            if np.any(ticks[1:] < ticks[:-1]):
                raise StreamFormatError("non-monotone timestamps")
            if int(ticks[-1]) > span:
                raise StreamFormatError("tick beyond span")
        ticks.setflags(write=False)
        object.__setattr__(self, "ticks", ticks)
        object.__setattr__(self, "span_ticks", span)
        object.__setattr__(self, "resolution_ps", res)
        object.__setattr__(self, "channel", int(self.channel))

    def __len__(self) -> int:
        return int(self.ticks.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TimeTagStream):
            return NotImplemented
        return (
            self.span_ticks == other.span_ticks
            and self.resolution_ps == other.resolution_ps
            and self.channel == other.channel
            and np.array_equal(self.ticks, other.ticks)
        )

    @property
    def span_s(self) -> float:
        return self.span_ticks * self.resolution_ps * 1e-12

    @property
    def tick_s(self) -> float:
        return self.resolution_ps * 1e-12

    def times_s(self) -> np.ndarray:
        """Arrival times in seconds (float64)."""
        return self.ticks.astype(np.float64) * self.tick_s

    def as_int64(self) -> np.ndarray:
        """Zero-copy signed view used by the numba kernels."""
        return self.ticks.view(np.int64)

    def replace_ticks(self, ticks, channel: int | None = None) -> "TimeTagStream":
        """New stream with the same span/resolution and different events."""
        return TimeTagStream(
            ticks=ticks,
            span_ticks=self.span_ticks,
            resolution_ps=self.resolution_ps,
            channel=self.channel if channel is None else channel,
        )

    @classmethod
    def from_seconds(cls, times_s, span_s: float, resolution_ps: int = 1, channel: int = 0):
        """Quantize real-valued arrival times (floor) onto the tick grid."""
        scale = 1e12 / resolution_ps
        ticks = np.floor(np.asarray(times_s, dtype=np.float64) * scale).astype(np.uint64)
        span = int(round(span_s * scale))
        return cls(ticks=ticks, span_ticks=span, resolution_ps=resolution_ps, channel=channel)


@dataclass(frozen=True)
class StreamStats:
    count: int
    flux_cps: float
    mean_waiting_time_s: float | None


def stats(stream: TimeTagStream) -> StreamStats:
    """Event count, photodetection flux and mean waiting time of a stream."""
    count = len(stream)
    flux = count * 1e12 / (stream.span_ticks * stream.resolution_ps)
    return StreamStats(count=count, flux_cps=flux, mean_waiting_time_s=1.0 / flux if count else None)


def _detect_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("binary", "csv"):
            raise ValueError(f"unknown format {fmt!r}")
        return fmt
    return "csv" if path.suffix.lower() in (".csv", ".txt") else "binary"


def write_stream(stream: TimeTagStream, path, format: str | None = None) -> None:
    """Write ``stream`` as ``.ptag`` binary (default) or CSV."""
    path = Path(path)
    fmt = _detect_format(path, format)
    if fmt == "binary":
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, stream.channel, stream.resolution_ps))
            fh.write(_SPAN.pack(stream.span_ticks))
            fh.write(stream.ticks.astype("<u8", copy=False).tobytes())
        return
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# resolution_ps={stream.resolution_ps}\n")
        fh.write(f"# span_ticks={stream.span_ticks}\n")
        fh.write(f"# channel={stream.channel}\n")
        if len(stream):
            np.savetxt(fh, stream.ticks, fmt="%d")


def _read_binary(path: Path) -> TimeTagStream:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size + _SPAN.size:
        raise StreamFormatError("malformed header: file too short")
    magic, version, channel, resolution = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise StreamFormatError(f"malformed header: bad magic {magic!r}")
    if version != VERSION:
        raise StreamFormatError(f"malformed header: unsupported version {version}")
    (span,) = _SPAN.unpack_from(raw, _HEADER.size)
    body = len(raw) - _HEADER.size - _SPAN.size
    if body % 8:
        raise StreamFormatError("malformed body: size is not a multiple of 8 bytes")
    ticks = np.frombuffer(raw, dtype="<u8", offset=_HEADER.size + _SPAN.size).astype(np.uint64)
    return TimeTagStream(ticks=ticks, span_ticks=span, resolution_ps=resolution, channel=channel)


def _read_csv(path: Path) -> TimeTagStream:
    header: dict[str, str] = {}
    body: list[str] = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, sep, value = line[1:].partition("=")
                if sep:
                    header[key.strip()] = value.strip()
                continue
            body.append(line)
    try:
        resolution = int(header["resolution_ps"])
        span = int(header["span_ticks"])
        channel = int(header.get("channel", 0))
    except (KeyError, ValueError) as exc:
        raise StreamFormatError(f"malformed header: {exc}") from None
    try:
        values = [int(v) for v in body]
    except ValueError as exc:
        raise StreamFormatError(f"malformed tick value: {exc}") from None
    if values and (min(values) < 0 or max(values) > _MAX_TICK):
        raise StreamFormatError("tick value out of range")
    return TimeTagStream(
        ticks=np.array(values, dtype=np.uint64),
        span_ticks=span,
        resolution_ps=resolution,
        channel=channel,
    )


def read_stream(path, format: str | None = None) -> TimeTagStream:
    """Read a stream written by :func:`write_stream`.

    The format is taken from ``format`` or inferred from the suffix (``.csv``
    means CSV, anything else binary). Raises :class:`StreamFormatError` for a
    bad header, unsorted ticks or ticks beyond the span; ``OSError`` for I/O.
    """
    path = Path(path)
    if _detect_format(path, format) == "binary":
        return _read_binary(path)
    return _read_csv(path)
