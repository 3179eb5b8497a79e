"""Versioned binary model container.

Layout, all integers little-endian::

    b"SDL1"
    u32 header length, then that many bytes of UTF-8 JSON
        {"format_version": 1, "network_spec": {...}}
    u32 entry count, then per entry:
        u16 name length, name (UTF-8)
        u8  dtype code (1 = float64)
        u8  ndim, then ndim x u32 dims
        u64 payload byte count, payload (little-endian float64, C order)

Entries hold every parameter and buffer of the network by dotted name.
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

from .network import MDSNet, NetworkSpec, build_network

__all__ = ["MAGIC", "FORMAT_VERSION", "FormatError", "save_model", "load_model", "dumps", "loads"]

MAGIC = b"SDL1"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def _state(net: MDSNet):
    yield from ((n, p.data) for n, p in net.named_parameters())
    yield from net.named_buffers()


def dumps(net: MDSNet) -> bytes:
    buf = io.BytesIO()
    header = json.dumps({"format_version": FORMAT_VERSION, "network_spec": net.spec.to_dict()},
                        sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    entries = list(_state(net))
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        data = np.asarray(arr, dtype="<f8", order="C")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", 1, data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        payload = data.tobytes()
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    return buf.getvalue()


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated model file at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(blob: bytes) -> MDSNet:
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic bytes {bytes(blob[:4])!r}, expected {MAGIC!r}")
    r = _Reader(blob)
    r.take(4)
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable header: {e}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {header.get('format_version')}")
    net = build_network(NetworkSpec.from_dict(header["network_spec"]))
    params = dict(net.named_parameters())
    buffers = dict(net.named_buffers())
    (count,) = r.unpack("<I")
    seen = set()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"entry {name!r}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        arr = np.frombuffer(r.take(nbytes), dtype=_DTYPES[code])
        if arr.size != int(np.prod(shape)):
            raise FormatError(f"entry {name!r}: payload does not match shape {shape}")
        arr = arr.reshape(shape).astype(np.float64)
        if name in params:
            target = params[name].data
        elif name in buffers:
            target = buffers[name]
        else:
            raise FormatError(f"unexpected entry {name!r}")
        if target.shape != arr.shape:
            raise FormatError(f"entry {name!r}: shape {arr.shape} != expected {target.shape}")
        target[...] = arr
        seen.add(name)
    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise FormatError(f"missing entries: {sorted(missing)[:5]}")
    if r.pos != len(blob):
        raise FormatError("trailing bytes after last entry")
    return net


def save_model(net: MDSNet, path):
    with open(path, "wb") as f:
        f.write(dumps(net))


def load_model(path) -> MDSNet:
    with open(path, "rb") as f:
        return loads(f.read())
