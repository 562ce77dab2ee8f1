"""Lossless telemetry body codec: per-field delta, zigzag, LEB128 varint.

The three sample fields are coded as separate streams (all bandwidth
deltas, then compute, then DRAM) so slowly varying counters collapse to
runs of single zero bytes.
"""

from __future__ import annotations

import numpy as np

from ..errors import Malformed
from ..workload.formats import SAMPLE_DTYPE

FIELDS = ("bw", "cu", "du")
_MAX_VARINT = 10


def zigzag(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.int64)
    return ((v << 1) ^ (v >> 63)).view(np.uint64)


def unzigzag(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    return ((z >> np.uint64(1)).view(np.int64)) ^ -((z & np.uint64(1)).view(np.int64))


def encode_uvarints(values: np.ndarray) -> bytes:
    v = np.asarray(values, dtype=np.uint64)
    if v.size == 0:
        return b""
    nb = np.ones(v.shape, dtype=np.int64)
    for k in range(1, _MAX_VARINT):
        nb += v >= np.uint64(1 << (7 * k))
    offsets = np.cumsum(nb) - nb
    out = np.empty(int(nb.sum()), dtype=np.uint8)
    for k in range(int(nb.max())):
        m = nb > k
        byte = (v[m] >> np.uint64(7 * k)) & np.uint64(0x7F)
        byte |= np.where(nb[m] > k + 1, np.uint64(0x80), np.uint64(0))
        out[offsets[m] + k] = byte
    return out.tobytes()


def decode_uvarints(data: bytes, count: int | None = None) -> np.ndarray:
    b = np.frombuffer(data, dtype=np.uint8)
    if b.size == 0:
        if count:
            raise Malformed(f"expected {count} varints, got none")
        return np.zeros(0, dtype=np.uint64)
    ends = np.flatnonzero(b < 0x80)
    if ends.size == 0 or ends[-1] != b.size - 1:
        raise Malformed("varint stream ends mid-value", location=int(b.size))
    starts = np.concatenate(([0], ends[:-1] + 1))
    lengths = ends - starts + 1
    if lengths.max() > _MAX_VARINT:
        raise Malformed("varint longer than 10 bytes", location=int(starts[np.argmax(lengths)]))
    if count is not None and ends.size != count:
        raise Malformed(f"expected {count} varints, found {ends.size}")
    out = np.zeros(ends.size, dtype=np.uint64)
    for k in range(int(lengths.max())):
        m = lengths > k
        out[m] |= (b[starts[m] + k].astype(np.uint64) & np.uint64(0x7F)) << np.uint64(7 * k)
    return out


def compress_samples(samples: np.ndarray) -> bytes:
    """Encode an array of :data:`SAMPLE_DTYPE` records."""
    samples = np.asarray(samples, dtype=SAMPLE_DTYPE)
    if samples.size == 0:
        return b""
    streams = []
    for f in FIELDS:
        col = samples[f].astype(np.int64)
        streams.append(zigzag(np.diff(col, prepend=0)))
    return encode_uvarints(np.concatenate(streams))


def decompress_samples(data: bytes, count: int) -> np.ndarray:
    out = np.empty(count, dtype=SAMPLE_DTYPE)
    if count == 0:
        if data:
            raise Malformed("non-empty body for zero samples")
        return out
    vals = unzigzag(decode_uvarints(data, 3 * count))
    for i, f in enumerate(FIELDS):
        col = np.cumsum(vals[i * count : (i + 1) * count])
        info = np.iinfo(SAMPLE_DTYPE[f])
        if col.min() < 0 or col.max() > info.max:
            raise Malformed(f"decoded {f} value out of range")
        out[f] = col
    return out
