"""Trace file formats.

CSV: header ``duration_us,bw_tbps,compute_util,dram_util,label`` and one
record per row.

Binary samples (little-endian): a 24-byte preamble

    magic  b"ATRC"   4 bytes
    version u8       1
    count   u32      number of records
    period  u32      fixed record duration in microseconds
    name_len u8      GPU name length (at most 10)
    name    bytes    GPU name, zero padded to the end of the preamble

followed by ``count`` 8-byte records ``<u32 bw MB/s, u16 compute, u16 dram>``
with utilisations scaled so 65535 means 1.0.
"""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from ..errors import ConfigError, EmptyTrace, Malformed
from ..pricing import GpuModel
from .trace import Trace

CSV_HEADER = ["duration_us", "bw_tbps", "compute_util", "dram_util", "label"]

ATRC_MAGIC = b"ATRC"
ATRC_VERSION = 1
PREAMBLE_SIZE = 24
_PREAMBLE = struct.Struct("<4sBIIB")
MAX_NAME = PREAMBLE_SIZE - _PREAMBLE.size

SAMPLE_DTYPE = np.dtype([("bw", "<u4"), ("cu", "<u2"), ("du", "<u2")])
UTIL_SCALE = 65535
MBPS_PER_TBPS = 1_000_000


def quantize(bw, compute_util, dram_util) -> np.ndarray:
    """Pack bandwidth (TB/s) and utilisations into 8-byte sample records."""
    bw = np.asarray(bw, dtype=float)
    out = np.empty(bw.shape, dtype=SAMPLE_DTYPE)
    out["bw"] = np.clip(np.rint(bw * MBPS_PER_TBPS), 0, 2**32 - 1)
    out["cu"] = np.clip(np.rint(np.asarray(compute_util) * UTIL_SCALE), 0, UTIL_SCALE)
    out["du"] = np.clip(np.rint(np.asarray(dram_util) * UTIL_SCALE), 0, UTIL_SCALE)
    return out


def dequantize(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        samples["bw"].astype(float) / MBPS_PER_TBPS,
        samples["cu"].astype(float) / UTIL_SCALE,
        samples["du"].astype(float) / UTIL_SCALE,
    )


def _read_bytes(src) -> bytes:
    if isinstance(src, (bytes, bytearray, memoryview)):
        return bytes(src)
    if isinstance(src, str):
        return src.encode("utf-8")
    return src.read()


def parse_trace(src: bytes | str | BinaryIO, fmt: str = "csv", gpu: GpuModel | str | None = None) -> Trace:
    """Parse a trace from raw bytes or a binary stream.

    ``gpu`` names the GPU for CSV input; when a :class:`GpuModel` is given
    the record bandwidths are checked against its peak.
    """
    data = _read_bytes(src)
    if fmt == "csv":
        trace = _parse_csv(data, gpu.name if isinstance(gpu, GpuModel) else (gpu or ""))
    elif fmt in ("binary", "binary-samples", "atrc"):
        trace = _parse_binary(data)
        if isinstance(gpu, GpuModel) and trace.gpu and trace.gpu != gpu.name:
            raise Malformed(f"trace was recorded on {trace.gpu}, not {gpu.name}")
    else:
        raise ConfigError(f"unknown trace format {fmt!r}")
    if isinstance(gpu, GpuModel):
        trace.check_gpu(gpu)
    return trace


def _parse_csv(data: bytes, gpu: str) -> Trace:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise Malformed(f"trace is not UTF-8: {exc}", location=exc.start) from exc
    rows = csv.reader(io.StringIO(text))
    durations, bws, cus, dus, labels = [], [], [], [], []
    for lineno, row in enumerate(rows, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if row[0].strip() == CSV_HEADER[0]:
            if [c.strip() for c in row[: len(CSV_HEADER)]] != CSV_HEADER[: len(row)]:
                raise Malformed(f"line {lineno}: unexpected header {row}", location=lineno)
            continue
        if len(row) not in (4, 5):
            raise Malformed(f"line {lineno}: expected 4 or 5 fields, got {len(row)}", location=lineno)
        try:
            d, b, c, m = (float(x) for x in row[:4])
        except ValueError as exc:
            raise Malformed(f"line {lineno}: {exc}", location=lineno) from exc
        durations.append(d)
        bws.append(b)
        cus.append(c)
        dus.append(m)
        labels.append(row[4] if len(row) == 5 else "")
    if not durations:
        raise EmptyTrace("trace file contains no records")
    try:
        return Trace(gpu, durations, bws, cus, dus, labels)
    except Malformed as exc:
        # report file line numbers rather than record indices
        raise Malformed(str(exc), location=exc.location) from exc


def _parse_binary(data: bytes) -> Trace:
    if not data:
        raise EmptyTrace("trace file is empty")
    if len(data) < PREAMBLE_SIZE:
        raise Malformed("truncated preamble", location=len(data))
    magic, version, count, period, name_len = _PREAMBLE.unpack_from(data)
    if magic != ATRC_MAGIC:
        raise Malformed(f"bad magic {magic!r}", location=0)
    if version != ATRC_VERSION:
        raise Malformed(f"unsupported version {version}", location=4)
    if name_len > MAX_NAME:
        raise Malformed(f"GPU name length {name_len} exceeds {MAX_NAME}", location=13)
    name = data[_PREAMBLE.size : _PREAMBLE.size + name_len].decode("ascii", errors="replace")
    body = data[PREAMBLE_SIZE:]
    if len(body) != count * SAMPLE_DTYPE.itemsize:
        raise Malformed(f"expected {count} records, found {len(body) / SAMPLE_DTYPE.itemsize:g}", location=PREAMBLE_SIZE)
    if count == 0:
        raise EmptyTrace("trace file contains no records")
    if period == 0:
        raise Malformed("period must be positive", location=9)
    samples = np.frombuffer(body, dtype=SAMPLE_DTYPE)
    bw, cu, du = dequantize(samples)
    return Trace(name, np.full(count, float(period)), bw, cu, du)


def serialize_trace(trace: Trace, fmt: str = "csv") -> bytes:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in trace.records:
            w.writerow([repr(r.duration), repr(r.bw), repr(r.compute_util), repr(r.dram_util), r.label])
        return buf.getvalue().encode("utf-8")
    if fmt in ("binary", "binary-samples", "atrc"):
        return _serialize_binary(trace)
    raise ConfigError(f"unknown trace format {fmt!r}")


def _serialize_binary(trace: Trace) -> bytes:
    period = float(trace.durations[0])
    if not (period.is_integer() and np.all(trace.durations == period)):
        raise ValueError("binary samples need equal integer-microsecond record durations")
    name = trace.gpu.encode("ascii")
    if len(name) > MAX_NAME:
        raise ValueError(f"GPU name {trace.gpu!r} longer than {MAX_NAME} bytes")
    pre = _PREAMBLE.pack(ATRC_MAGIC, ATRC_VERSION, len(trace), int(period), len(name)) + name
    pre = pre.ljust(PREAMBLE_SIZE, b"\0")
    return pre + quantize(trace.bw, trace.compute_util, trace.dram_util).tobytes()


def read_trace(path: str | Path, gpu: GpuModel | str | None = None, fmt: str | None = None) -> Trace:
    path = Path(path)
    if fmt is None:
        fmt = "binary" if path.suffix in (".atrc", ".bin") else "csv"
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read trace {path}: {exc}") from exc
    return parse_trace(data, fmt, gpu)


def write_trace(trace: Trace, path: str | Path, fmt: str | None = None) -> Path:
    path = Path(path)
    if fmt is None:
        fmt = "binary" if path.suffix in (".atrc", ".bin") else "csv"
    path.write_bytes(serialize_trace(trace, fmt))
    return path
