"""Input encodings: direct coding of static images and temporal binning of event streams."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._backend import kernels

__all__ = ["EventRecord", "EncodingConfig", "RecordError", "ParseError",
           "direct_encode", "event_bin", "parse_event_csv"]


class RecordError(ValueError):
    """An event lies outside the sensor; ``index`` is its position in the input."""

    def __init__(self, msg, index):
        super().__init__(msg)
        self.index = index


class ParseError(ValueError):
    def __init__(self, msg, line):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class EventRecord(NamedTuple):
    t: int   # microseconds
    x: int
    y: int
    p: int   # polarity, 0 or 1


@dataclass(frozen=True)
class EncodingConfig:
    T: int
    window: int                 # microseconds
    height: int
    width: int
    clip: float | None = 4.0    # None disables clipping
    normalize: bool = False     # divide counts by the clip value

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.window <= 0:
            raise ValueError("window must be positive")
        if self.height < 1 or self.width < 1:
            raise ValueError("sensor dimensions must be positive")
        if self.clip is not None and self.clip <= 0:
            raise ValueError("clip must be positive or None")
        if self.normalize and self.clip is None:
            raise ValueError("normalize requires a finite clip value")


def direct_encode(image, T: int) -> np.ndarray:
    """Repeat a static image T times along a new leading time axis.

    Accepts (C, H, W) or (1, C, H, W); returns (T, C, H, W).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise ValueError(f"expected a leading axis of size 1, got shape {img.shape}")
        img = img[0]
    if img.ndim != 3:
        raise ValueError(f"expected (C, H, W) or (1, C, H, W), got shape {img.shape}")
    return np.repeat(img[None], T, axis=0)


def _as_columns(events):
    if isinstance(events, np.ndarray):
        arr = np.asarray(events, dtype=np.int64).reshape(-1, 4)
    else:
        arr = np.array([tuple(e) for e in events], dtype=np.int64).reshape(-1, 4)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]


def event_bin(events, cfg: EncodingConfig) -> np.ndarray:
    """Accumulate events into a (T, 2, H, W) count tensor.

    Bin index is floor(t * T / window), so an event on a bin edge lands in the
    later bin; t == window clamps to the last bin. Events after the window are
    dropped. Channel 0 counts polarity 0, channel 1 polarity 1.
    """
    t, x, y, p = _as_columns(events)
    bad = (x < 0) | (x >= cfg.width) | (y < 0) | (y >= cfg.height) | ((p != 0) & (p != 1)) | (t < 0)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise RecordError(f"event {i} out of range: t={t[i]} x={x[i]} y={y[i]} p={p[i]} "
                          f"(sensor {cfg.width}x{cfg.height})", i)
    keep = t <= cfg.window
    if not keep.all():
        t, x, y, p = t[keep], x[keep], y[keep], p[keep]
    out = kernels.event_bin(np.ascontiguousarray(t), np.ascontiguousarray(x),
                            np.ascontiguousarray(y), np.ascontiguousarray(p),
                            cfg.T, cfg.window, cfg.height, cfg.width)
    if cfg.clip is not None and math.isfinite(cfg.clip):
        np.minimum(out, cfg.clip, out=out)
        if cfg.normalize:
            out /= cfg.clip
    return out


def parse_event_csv(stream) -> list:
    """Parse "t_us,x,y,p" lines from a bytes/text stream or a bytes object.

    A first line that is not numeric is taken as a header and skipped. Blank
    lines are ignored.
    """
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    records = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split(",")
        if lineno == 1 and not records and not fields[0].strip().lstrip("-").isdigit():
            continue
        if len(fields) != 4:
            raise ParseError(f"expected 4 fields, got {len(fields)}", lineno)
        try:
            t, x, y, p = (int(f) for f in fields)
        except ValueError:
            raise ParseError(f"non-integer field in {line!r}", lineno) from None
        if t < 0:
            raise ParseError(f"negative timestamp {t}", lineno)
        if x < 0 or y < 0:
            raise ParseError(f"negative coordinate in {line!r}", lineno)
        if p not in (0, 1):
            raise ParseError(f"polarity must be 0 or 1, got {p}", lineno)
        records.append(EventRecord(t, x, y, p))
    return records
