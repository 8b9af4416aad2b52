"""Common binary envelope for datasets, checkpoints, and lifting tables.

Layout: 4-byte magic, u32 version, length-prefixed JSON metadata, then a
count of named float64 arrays stored as (name, ndim, dims..., raw LE data).
Everything little-endian; round-trips are bit-exact.
"""

import json
import struct

import numpy as np

from .errors import FormatError

VERSION = 1


def write_envelope(path, magic, meta, arrays):
    """Write `meta` (JSON-serializable dict) and `arrays` (name -> ndarray)."""
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.tobytes(order="C"))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", offset=self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what):
        return struct.unpack("<Q", self.take(8, what))[0]


def read_envelope(path, magic):
    """Read an envelope written by write_envelope; returns (meta, arrays)."""
    with open(path, "rb") as fh:
        data = fh.read()
    rd = _Reader(data)
    got = rd.take(4, "magic header")
    if got != magic:
        raise FormatError(
            f"bad magic header {got!r}, expected {magic!r}", offset=0
        )
    version = rd.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    meta_len = rd.u64("metadata length")
    try:
        meta = json.loads(rd.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt metadata block: {exc}", offset=16) from exc
    arrays = {}
    n_arrays = rd.u32("array count")
    for _ in range(n_arrays):
        name_len = rd.u32("array name length")
        name = rd.take(name_len, "array name").decode("utf-8")
        ndim = rd.u32("array rank")
        if ndim > 8:
            raise FormatError(f"implausible array rank {ndim}", offset=rd.pos - 4)
        shape = tuple(rd.u64("array dim") for _ in range(ndim))
        count = 1
        for dim in shape:
            count *= dim
        raw = rd.take(8 * count, f"array {name!r} data")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if rd.pos != len(data):
        raise FormatError("trailing bytes after last array", offset=rd.pos)
    return meta, arrays
