"""Utilization traces: per-kernel (or per-token) step functions of bandwidth."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..errors import BwExceedsGpu, EmptyTrace, Malformed
from ..pricing import GpuModel

BW_RTOL = 1e-9


@dataclass(frozen=True)
class UtilizationRecord:
    duration: float  # microseconds
    bw: float  # TB/s
    compute_util: float
    dram_util: float
    label: str = ""


class Trace:
    """An ordered sequence of utilization records for one job on one GPU.

    Columns are stored as numpy arrays; :attr:`records` materialises
    :class:`UtilizationRecord` objects on demand.
    """

    __slots__ = ("gpu", "durations", "bw", "compute_util", "dram_util", "labels", "token_count")

    def __init__(self, gpu: str, durations, bw, compute_util, dram_util, labels=None, token_count=None):
        self.gpu = gpu
        self.durations = np.ascontiguousarray(durations, dtype=float)
        self.bw = np.ascontiguousarray(bw, dtype=float)
        self.compute_util = np.ascontiguousarray(compute_util, dtype=float)
        self.dram_util = np.ascontiguousarray(dram_util, dtype=float)
        n = len(self.durations)
        self.labels = tuple(labels) if labels is not None else ("",) * n
        self.token_count = None if token_count is None else int(token_count)
        if not (len(self.bw) == len(self.compute_util) == len(self.dram_util) == len(self.labels) == n):
            raise Malformed("trace columns have different lengths")
        if n == 0:
            raise EmptyTrace(f"trace for {gpu} has no records")
        _check_columns(self)

    @classmethod
    def from_records(cls, gpu: str, records: Iterable[UtilizationRecord], token_count=None) -> "Trace":
        recs = list(records)
        return cls(
            gpu,
            [r.duration for r in recs],
            [r.bw for r in recs],
            [r.compute_util for r in recs],
            [r.dram_util for r in recs],
            [r.label for r in recs],
            token_count,
        )

    @property
    def records(self) -> list[UtilizationRecord]:
        return [
            UtilizationRecord(float(d), float(b), float(c), float(m), lab)
            for d, b, c, m, lab in zip(self.durations, self.bw, self.compute_util, self.dram_util, self.labels)
        ]

    def __len__(self):
        return len(self.durations)

    @property
    def total_duration(self) -> float:
        """Time to complete the job, in microseconds."""
        return float(math.fsum(self.durations))

    @property
    def total_hours(self) -> float:
        return self.total_duration / 3.6e9

    def boundaries(self) -> np.ndarray:
        """Record start times plus the end time (length ``n + 1``)."""
        out = np.empty(len(self.durations) + 1)
        out[0] = 0.0
        np.cumsum(self.durations, out=out[1:])
        return out

    def check_gpu(self, gpu: GpuModel) -> "Trace":
        limit = gpu.bw_max * (1 + BW_RTOL)
        over = np.flatnonzero(self.bw > limit)
        if over.size:
            i = int(over[0])
            raise BwExceedsGpu(f"record {i}: bw {self.bw[i]} TB/s exceeds {gpu.name} peak {gpu.bw_max}", index=i)
        return self

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            self.gpu == other.gpu
            and self.token_count == other.token_count
            and self.labels == other.labels
            and np.array_equal(self.durations, other.durations)
            and np.array_equal(self.bw, other.bw)
            and np.array_equal(self.compute_util, other.compute_util)
            and np.array_equal(self.dram_util, other.dram_util)
        )

    __hash__ = object.__hash__

    def __repr__(self):
        return f"Trace(gpu={self.gpu!r}, records={len(self)}, duration_us={self.total_duration:g})"

    @staticmethod
    def concat(traces: Sequence["Trace"]) -> "Trace":
        if not traces:
            raise EmptyTrace("nothing to concatenate")
        tokens = [t.token_count for t in traces]
        return Trace(
            traces[0].gpu,
            np.concatenate([t.durations for t in traces]),
            np.concatenate([t.bw for t in traces]),
            np.concatenate([t.compute_util for t in traces]),
            np.concatenate([t.dram_util for t in traces]),
            [lab for t in traces for lab in t.labels],
            None if any(x is None for x in tokens) else sum(tokens),
        )


def _check_columns(t: Trace) -> None:
    d = t.durations
    bad = ~(np.isfinite(d) & (d > 0))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise Malformed(f"record {i}: duration must be positive, got {d[i]}", location=i)
    bad = ~(np.isfinite(t.bw) & (t.bw >= 0))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise Malformed(f"record {i}: bandwidth must be non-negative, got {t.bw[i]}", location=i)
    for name in ("compute_util", "dram_util"):
        col = getattr(t, name)
        bad = ~((col >= 0) & (col <= 1))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise Malformed(f"record {i}: {name} must be in [0, 1], got {col[i]}", location=i)


@dataclass(frozen=True)
class TraceStats:
    total_duration: float  # microseconds
    mean_bw: float  # time-weighted, TB/s
    peak_bw: float


def trace_stats(trace: Trace) -> TraceStats:
    if trace is None or len(trace) == 0:
        raise EmptyTrace("empty trace")
    total = trace.total_duration
    mean = float(np.dot(trace.bw, trace.durations) / total)
    return TraceStats(total, mean, float(trace.bw.max()))


def _ceil_div(x: np.ndarray, d: float) -> tuple[np.ndarray, np.ndarray]:
    """ceil(x / d), snapping quotients within 1e-9 of an integer onto it.

    Also returns the mask of snapped (tick-aligned) entries.
    """
    q = np.asarray(x, dtype=float) / d
    r = np.rint(q)
    near = np.abs(q - r) <= 1e-9 * np.maximum(1.0, np.abs(q))
    return np.where(near, r, np.ceil(q)).astype(np.int64), near


@dataclass(frozen=True)
class TickGrid:
    """Sampling windows laid over a trace.

    Window ``i`` covers ``[i*period, min((i+1)*period, total))``.  Record
    ``k`` owns the windows whose start tick falls inside it, i.e. indices
    ``first[k] <= i < first[k+1]``.
    """

    period: float
    total: float
    bounds: np.ndarray  # record boundaries, length n_records + 1
    first: np.ndarray  # first window index per boundary, length n_records + 1
    aligned: np.ndarray  # boundary falls exactly on a tick

    @property
    def n_windows(self) -> int:
        return int(self.first[-1])

    def record_of_window(self, idx) -> np.ndarray:
        """Index of the record active at the start tick of each window."""
        return np.searchsorted(self.first, idx, side="right") - 1

    def window_lengths(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        starts = idx * self.period
        return np.minimum(starts + self.period, self.total) - starts


def tick_grid(trace: Trace, period: float) -> TickGrid:
    if not period > 0:
        raise ValueError(f"sampling period must be positive, got {period}")
    bounds = trace.boundaries()
    first, aligned = _ceil_div(bounds, period)
    first[0] = 0
    total = float(bounds[-1])
    return TickGrid(float(period), total, bounds, first, aligned)
