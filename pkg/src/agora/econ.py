"""Revenue simulation: ideal and sampled FBP prices, Monte-Carlo experiments.

All prices returned here are dollars (floats).  A job's ideal FBP price is
the exact integral of the curve over its bandwidth step function; sampled
prices split the job into fixed windows of ``period`` microseconds and charge
each window either at the bandwidth seen at its start tick (instantaneous)
or at its time-weighted mean bandwidth (window-average).  A final partial
window is charged for its actual length.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyInput, LengthMismatch, OutOfDomain
from .pricing import US_PER_HOUR, FbpCurve, GpuCatalog, tbp_cost
from .workload.jobs import JobDistribution, resolve_gpus, sample_index
from .workload.trace import Trace, tick_grid

INSTANTANEOUS = "instantaneous"
WINDOW_AVERAGE = "window-average"
DEFAULT_N_JOBS = 10_000
SWEEP_PERIODS_US = (10, 25, 50, 100, 150, 200, 250)


@dataclass(frozen=True)
class SamplingConfig:
    period: float  # microseconds
    mode: str = WINDOW_AVERAGE
    tail_policy: str = "pro-rata"

    def __post_init__(self):
        if not self.period > 0:
            raise ValueError(f"sampling period must be positive, got {self.period}")
        if self.mode not in (INSTANTANEOUS, WINDOW_AVERAGE):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.tail_policy != "pro-rata":
            raise ValueError(f"unsupported tail policy {self.tail_policy!r}")


def _ppt(curve: FbpCurve, bw: np.ndarray) -> np.ndarray:
    try:
        return curve.price_per_hour(bw)
    except OutOfDomain as exc:
        raise OutOfDomain(f"record {exc.index}: {exc}", index=exc.index) from None


def price_ideal(trace: Trace, curve: FbpCurve) -> float:
    """Sum of ``PPT(bw_k) * duration_k`` over records, in dollars."""
    return math.fsum(_ppt(curve, trace.bw) * trace.durations) / US_PER_HOUR


def price_sampled(trace: Trace, curve: FbpCurve, cfg: SamplingConfig) -> float:
    ppt = _ppt(curve, trace.bw)  # validates every record up front
    grid = tick_grid(trace, cfg.period)
    first, P, T = grid.first, grid.period, grid.total
    starts, ends = first[:-1], first[1:]
    owned = ends > starts  # records containing at least one start tick
    # time covered by the windows whose start tick falls in each record
    span = np.where(owned, np.minimum(ends * P, T) - starts * P, 0.0)

    if cfg.mode == INSTANTANEOUS:
        return math.fsum(ppt * span) / US_PER_HOUR

    # window-average: every window owned by record k lies inside it except
    # possibly its last one, which may straddle later records
    bounds = grid.bounds
    straddle = owned & ~grid.aligned[1:]
    straddle[-1] = False  # the final window is clipped at the trace end
    last_idx = ends[straddle] - 1
    w_start = last_idx * P
    w_end = np.minimum(w_start + P, T)
    w_len = w_end - w_start
    pure_span = span.copy()
    pure_span[straddle] -= w_len

    cum = np.concatenate(([0.0], np.cumsum(trace.bw * trace.durations)))
    mean = (np.interp(w_end, bounds, cum) - np.interp(w_start, bounds, cum)) / w_len
    # float noise must not push a mean outside the range it averages
    mean = np.clip(mean, 0.0, trace.bw.max())
    parts = [ppt * pure_span]
    if len(mean):
        parts.append(_ppt(curve, mean) * w_len)
    return math.fsum(np.concatenate(parts)) / US_PER_HOUR


def f_percent(costs_fbp: Sequence[float], costs_tbp: Sequence[float]) -> float:
    """Percentage of jobs charged strictly more under FBP than under TBP."""
    a = np.asarray(costs_fbp, dtype=float)
    b = np.asarray(costs_tbp, dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch(f"{a.size} FBP costs vs {b.size} TBP costs")
    if a.size == 0:
        raise EmptyInput("no costs given")
    return 100.0 * int(np.count_nonzero(a > b)) / a.size


@dataclass
class RevenueReport:
    n_jobs: int
    reference_gpu: str
    mean_tbp: dict[str, float]  # dollars per job, by GPU
    mean_fbp: float  # dollars per job on the reference GPU
    per_token_fbp: float | None  # nanodollars per token
    f_percent: float
    seed: int
    curve: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RevenueReport":
        return cls(**d)


@dataclass
class SamplingErrorRow:
    period_us: float
    ideal_mean: float
    real_mean: float
    percent_error: float


def _job_costs(dist: JobDistribution, curve: FbpCurve, catalog: GpuCatalog, reference_gpu: str, tbp_gpus):
    """Per-entry costs; draws then only index into these arrays."""
    ref = catalog[reference_gpu]
    gpus = resolve_gpus(catalog, tbp_gpus)
    dist.check_bindings([reference_gpu] + [g.name for g in gpus])
    fbp, tokens = [], []
    tbp = {g.name: [] for g in gpus}
    for job in dist.jobs:
        t = job.trace_for(ref)
        fbp.append(price_ideal(t, curve))
        tokens.append(t.token_count)
        for g in gpus:
            tbp[g.name].append(tbp_cost(g, job.trace_for(g).total_hours))
    return np.array(fbp), {k: np.array(v) for k, v in tbp.items()}, tokens


def draw_jobs(dist: JobDistribution, n_jobs: int, seed: int) -> np.ndarray:
    return sample_index(dist, np.random.default_rng(seed), n_jobs)


def run_experiment(
    dist: JobDistribution,
    curve: FbpCurve,
    catalog: GpuCatalog,
    reference_gpu: str = "H100",
    n_jobs: int = DEFAULT_N_JOBS,
    seed: int = 0,
    tbp_gpus: Sequence[str] | None = None,
) -> RevenueReport:
    """Draw ``n_jobs`` jobs and compare FBP on ``reference_gpu`` with TBP.

    TBP means are reported for ``tbp_gpus`` (default: every catalog GPU that
    all jobs have traces for, plus the reference GPU).
    """
    if n_jobs < 1:
        raise EmptyInput("n_jobs must be positive")
    if tbp_gpus is None:
        tbp_gpus = [g for g in catalog.names if all(j.has_binding(g) for j in dist.jobs)]
    tbp_gpus = list(dict.fromkeys(list(tbp_gpus) + [reference_gpu]))
    fbp, tbp, tokens = _job_costs(dist, curve, catalog, reference_gpu, tbp_gpus)
    idx = draw_jobs(dist, n_jobs, seed)
    drawn_fbp = fbp[idx]
    per_token = None
    if all(t for t in tokens):
        tok = np.array(tokens, dtype=float)[idx]
        per_token = float(np.mean(drawn_fbp / tok) * 1e9)
    return RevenueReport(
        n_jobs=n_jobs,
        reference_gpu=reference_gpu,
        mean_tbp={g: float(np.mean(tbp[g][idx])) for g in tbp_gpus},
        mean_fbp=float(np.mean(drawn_fbp)),
        per_token_fbp=per_token,
        f_percent=f_percent(drawn_fbp, tbp[reference_gpu][idx]),
        seed=seed,
        curve=str(curve),
    )


def sampling_error_sweep(
    dist: JobDistribution,
    curve: FbpCurve,
    catalog: GpuCatalog,
    reference_gpu: str = "H100",
    periods: Sequence[float] = SWEEP_PERIODS_US,
    n_jobs: int = DEFAULT_N_JOBS,
    seed: int = 0,
    mode: str = WINDOW_AVERAGE,
) -> list[SamplingErrorRow]:
    """Ideal vs sampled mean price for each period, on one shared set of draws."""
    if not periods:
        raise EmptyInput("no sampling periods given")
    ref = catalog[reference_gpu]
    dist.check_bindings([reference_gpu])
    idx = draw_jobs(dist, n_jobs, seed)
    counts = np.bincount(idx, minlength=len(dist.entries))
    used = np.flatnonzero(counts)
    traces = {i: dist.jobs[i].trace_for(ref) for i in used}
    ideal = {i: price_ideal(traces[i], curve) for i in used}
    ideal_mean = math.fsum(ideal[i] * counts[i] for i in used) / n_jobs
    rows = []
    for p in periods:
        cfg = SamplingConfig(float(p), mode)
        real_mean = math.fsum(price_sampled(traces[i], curve, cfg) * counts[i] for i in used) / n_jobs
        err = (real_mean - ideal_mean) / ideal_mean * 100.0
        rows.append(SamplingErrorRow(float(p), ideal_mean, real_mean, err))
    return rows


REPORT_COLUMNS = ["n_jobs", "gpu", "mean_tbp", "mean_fbp", "per_token_fbp", "f_percent", "seed"]
SWEEP_COLUMNS = ["period_us", "ideal_mean", "real_mean", "percent_error"]


def emit_report(obj, fmt: str = "csv") -> bytes:
    """Serialise a :class:`RevenueReport` or a list of sweep rows."""
    if fmt == "json":
        payload = obj.to_dict() if isinstance(obj, RevenueReport) else [asdict(r) for r in obj]
        return (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode()
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if isinstance(obj, RevenueReport):
        w.writerow(REPORT_COLUMNS)
        pt = "" if obj.per_token_fbp is None else repr(obj.per_token_fbp)
        for g, v in obj.mean_tbp.items():
            w.writerow([obj.n_jobs, g, repr(v), repr(obj.mean_fbp), pt, repr(obj.f_percent), obj.seed])
    else:
        w.writerow(SWEEP_COLUMNS)
        for r in obj:
            w.writerow([repr(r.period_us), repr(r.ideal_mean), repr(r.real_mean), repr(r.percent_error)])
    return buf.getvalue().encode()


def parse_report(data: bytes, fmt: str = "csv", kind: str = "revenue"):
    """Inverse of :func:`emit_report`.

    CSV revenue reports do not carry the reference GPU or curve label; those
    fields come back empty.
    """
    text = data.decode()
    if fmt == "json":
        payload = json.loads(text)
        if kind == "revenue":
            return RevenueReport.from_dict(payload)
        return [SamplingErrorRow(**r) for r in payload]
    rows = list(csv.DictReader(io.StringIO(text)))
    if kind == "revenue":
        first = rows[0]
        pt = first["per_token_fbp"]
        return RevenueReport(
            n_jobs=int(first["n_jobs"]),
            reference_gpu="",
            mean_tbp={r["gpu"]: float(r["mean_tbp"]) for r in rows},
            mean_fbp=float(first["mean_fbp"]),
            per_token_fbp=float(pt) if pt else None,
            f_percent=float(first["f_percent"]),
            seed=int(first["seed"]),
        )
    return [SamplingErrorRow(*(float(r[c]) for c in SWEEP_COLUMNS)) for r in rows]
