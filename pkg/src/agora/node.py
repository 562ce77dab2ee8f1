"""Node agent: replay per-GPU traces, price samples, seal and ship logs.

Each GPU slot gets a sampler thread that walks its trace on the tick grid,
prices every sample and seals a log every ``max_samples`` ticks.  Sealed
frames go into a per-node :class:`Outbox`; one sender thread drains it to
the collector and deletes an item only once the collector acknowledges it.
"""

from __future__ import annotations

import functools
import json
import logging
import os
import socket
import struct
import tempfile
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

from .billing.frame import ACK_SIZE, decode_ack, encode_frame, frame_for
from .billing.log import DEFAULT_MAX_SAMPLES, SequenceTracker, open_log, seal_log
from .errors import AgoraError, ConfigError, JournalFull
from .pricing import GpuCatalog, FbpCurve, load_catalog, load_curve, parse_notation
from .workload.formats import quantize, read_trace
from .workload.jobs import JobDistribution, load_distribution, sample_index
from .workload.synthetic import gen_synthetic_trace
from .workload.trace import Trace, tick_grid

log = logging.getLogger(__name__)

DEFAULT_PERIOD_US = 50
DEFAULT_QUEUE_CAPACITY = 64
DEFAULT_JOURNAL_BYTES = 1 << 30
MAX_GPUS = 8


# clocks ---------------------------------------------------------------------

@dataclass(frozen=True)
class Clock:
    """``logical`` never waits; ``realtime`` and ``accelerated`` pace trace time on the wall clock."""

    mode: str = "logical"
    factor: float = 1.0

    def __post_init__(self):
        if self.mode not in ("logical", "realtime", "accelerated"):
            raise ConfigError(f"unknown clock mode {self.mode!r}")
        if not self.factor > 0:
            raise ConfigError("clock factor must be positive")

    @classmethod
    def parse(cls, text: str) -> "Clock":
        text = text.strip()
        if text in ("logical", "realtime"):
            return cls(text)
        for sep in (":", "(", "x"):
            head, _, rest = text.partition(sep)
            if head == "accelerated" and rest:
                try:
                    return cls("accelerated", float(rest.rstrip(")")))
                except ValueError:
                    break
        raise ConfigError(f"cannot parse clock {text!r}; use logical, realtime or accelerated:<factor>")

    @property
    def logical(self) -> bool:
        return self.mode == "logical"

    def wall_seconds(self, trace_us: float) -> float:
        f = 1.0 if self.mode == "realtime" else self.factor
        return trace_us / 1e6 / f

    def __str__(self):
        return f"accelerated:{self.factor:g}" if self.mode == "accelerated" else self.mode


LOGICAL = Clock()


def now_us() -> int:
    return time.time_ns() // 1000


# sampling -------------------------------------------------------------------

@dataclass(frozen=True)
class TickSamples:
    samples: np.ndarray  # 8-byte records, one per tick
    bw: np.ndarray  # exact bandwidth of the record active at each tick, TB/s
    lengths: np.ndarray  # µs of trace time each sample stands for
    period: float


def tick_samples(trace: Trace, period: float) -> TickSamples:
    """Left-endpoint samples at ticks ``0, period, 2*period, ...`` before the trace end."""
    grid = tick_grid(trace, period)
    idx = np.arange(grid.n_windows)
    rec = grid.record_of_window(idx)
    bw = trace.bw[rec]
    samples = quantize(bw, trace.compute_util[rec], trace.dram_util[rec])
    return TickSamples(samples, bw, grid.window_lengths(idx), float(period))


def replay_sampler(trace: Trace, period: float, clock: Clock = LOGICAL) -> Iterator[np.void]:
    """Yield one 8-byte sample per tick, pacing on ``clock`` unless it is logical."""
    ticks = tick_samples(trace, period)
    t0 = time.monotonic()
    for i, s in enumerate(ticks.samples):
        if not clock.logical:
            lag = t0 + clock.wall_seconds(i * period) - time.monotonic()
            if lag > 1e-3:
                time.sleep(lag)
        yield s


def exact_charges(curve: FbpCurve, bw: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Unrounded per-sample charge in nanodollars: ``PPT(bw) * length``."""
    return curve.price_per_hour(bw) * lengths / 3.6


def price_increment(curve: FbpCurve, bw: float, period: float) -> int:
    """One sample's charge rounded half-to-even to whole nanodollars."""
    return int(np.rint(exact_charges(curve, np.array([bw]), np.array([period]))[0]))


def rounded_increments(exact: np.ndarray) -> np.ndarray:
    """Integer increments whose running sum tracks the exact running sum.

    Each prefix sum of the result is the half-even rounding of the exact
    prefix sum, so a log's amount is within half a nanodollar of its exact
    charge however many samples it holds.
    """
    cum = np.rint(np.cumsum(exact))
    return np.diff(cum, prepend=0.0).astype(np.int64)


# outbox and spill journal ------------------------------------------------------

_FRAME_ROUTING = struct.Struct(">IBQQIBQ")


@dataclass
class OutItem:
    counter: int
    gpu_id: int
    log_seq: int
    frame: bytes
    path: Path | None = None  # set once the item is on disk


class SpillJournal:
    """Directory of frames awaiting acknowledgement, one file per frame.

    File names carry a node-wide counter, so a restarted agent replays the
    journal in the original order.
    """

    def __init__(self, directory: str | Path, max_bytes: int = DEFAULT_JOURNAL_BYTES):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.max_bytes = max_bytes
        self.dead_dir = self.dir / "rejected"
        files = sorted(self.dir.glob("*.frame"))
        self.bytes_used = sum(p.stat().st_size for p in files)
        self.recovered = [self._load(p) for p in files]

    def _load(self, path: Path) -> OutItem:
        frame = path.read_bytes()
        *_, node, gpu, seq = _FRAME_ROUTING.unpack_from(frame)
        return OutItem(int(path.stem), gpu, seq, frame, path)

    def write(self, item: OutItem) -> None:
        if item.path is not None:
            return
        if self.bytes_used + len(item.frame) > self.max_bytes:
            raise JournalFull(f"spill journal {self.dir} is full ({self.bytes_used} bytes)")
        path = self.dir / f"{item.counter:016d}.frame"
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(item.frame)
        os.replace(tmp, path)
        self.bytes_used += len(item.frame)
        item.path = path

    def delete(self, item: OutItem) -> None:
        if item.path is not None:
            self.bytes_used -= len(item.frame)
            item.path.unlink(missing_ok=True)
            item.path = None

    def reject(self, item: OutItem) -> None:
        """Keep a frame the collector refused, out of the send queue."""
        self.dead_dir.mkdir(exist_ok=True)
        (self.dead_dir / f"{item.counter:016d}.frame").write_bytes(item.frame)
        self.delete(item)

    def pending_files(self) -> int:
        return sum(1 for _ in self.dir.glob("*.frame"))


class Outbox:
    """Bounded in-memory FIFO that overflows into a :class:`SpillJournal`.

    Items in memory are always older than items on disk: once anything has
    spilled, new items keep going to disk until the backlog drains.
    """

    def __init__(self, journal: SpillJournal, capacity: int = DEFAULT_QUEUE_CAPACITY):
        if capacity < 1:
            raise ConfigError("queue capacity must be at least 1")
        self.journal = journal
        self.capacity = capacity
        self._mem: deque[OutItem] = deque()
        self._disk: deque[OutItem] = deque()  # frames dropped from memory, on disk only
        self._cond = threading.Condition()
        self._closed = False
        for item in journal.recovered:
            self._disk.append(OutItem(item.counter, item.gpu_id, item.log_seq, b"", item.path))
        self._counter = max((i.counter for i in journal.recovered), default=-1) + 1
        journal.recovered = []
        self.spilled = 0

    def put(self, gpu_id: int, log_seq: int, frame: bytes) -> None:
        with self._cond:
            item = OutItem(self._counter, gpu_id, log_seq, frame)
            self._counter += 1
            if self._disk or len(self._mem) >= self.capacity:
                self.journal.write(item)
                item.frame = b""  # reload lazily
                self._disk.append(item)
                self.spilled += 1
            else:
                self._mem.append(item)
            self._cond.notify_all()

    def close(self) -> None:
        """No more items will be put; waiters wake up once the box is empty."""
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def peek(self, timeout: float | None = None) -> OutItem | None:
        """Oldest unacknowledged item, or None if closed and empty (or timed out)."""
        with self._cond:
            end = None if timeout is None else time.monotonic() + timeout
            while not self._mem and not self._disk:
                if self._closed:
                    return None
                left = None if end is None else end - time.monotonic()
                if left is not None and left <= 0:
                    return None
                self._cond.wait(left)
            if not self._mem:
                item = self._disk.popleft()
                item.frame = item.path.read_bytes()
                self._mem.append(item)
            return self._mem[0]

    def ack(self, item: OutItem) -> None:
        with self._cond:
            if not self._mem or self._mem[0] is not item:
                raise RuntimeError("only the head item can be acknowledged")
            self._mem.popleft()
            self.journal.delete(item)
            self._cond.notify_all()

    def reject(self, item: OutItem) -> None:
        with self._cond:
            self._mem.popleft()
            self.journal.reject(item)

    def persist(self) -> None:
        """Write every in-memory item to disk (done whenever sending fails)."""
        with self._cond:
            for item in self._mem:
                self.journal.write(item)

    def __len__(self):
        with self._cond:
            return len(self._mem) + len(self._disk)


# configuration ----------------------------------------------------------------

@dataclass
class GpuSlot:
    gpu_id: int
    customer_id: int
    rental_id: int
    trace: Trace | dict | str | Path
    gpu: str = "H100"
    first_seq: int = 0


@dataclass
class NodeConfig:
    node_id: int
    gpus: list[GpuSlot]
    curve: FbpCurve
    collector: tuple[str, int] | None = None
    period: int = DEFAULT_PERIOD_US
    clock: Clock = LOGICAL
    max_samples: int = DEFAULT_MAX_SAMPLES
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY
    journal_dir: str | Path | None = None
    journal_bytes: int = DEFAULT_JOURNAL_BYTES
    epoch_us: int | None = None  # trace time zero on the wall clock; default: start of run
    deliver_timeout: float | None = 120.0  # seconds to keep retrying after sampling ends
    backoff: tuple[float, float] = (0.01, 1.0)
    catalog: GpuCatalog | None = None

    def __post_init__(self):
        if not 1 <= len(self.gpus) <= MAX_GPUS:
            raise ConfigError(f"node {self.node_id}: needs 1 to {MAX_GPUS} GPUs, got {len(self.gpus)}")
        ids = [s.gpu_id for s in self.gpus]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"node {self.node_id}: duplicate gpu ids {ids}")
        if not (isinstance(self.period, int) or float(self.period).is_integer()) or self.period <= 0:
            raise ConfigError(f"period must be a positive whole number of microseconds, got {self.period}")
        self.period = int(self.period)
        if self.max_samples < 1:
            raise ConfigError("max_samples must be positive")

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "NodeConfig":
        base = base or Path(".")
        try:
            catalog = load_catalog(base / d["catalog"]) if "catalog" in d else load_catalog()
            curve = resolve_curve(d["curve"], catalog, base)
            coll = d.get("collector")
            if isinstance(coll, str):
                host, _, port = coll.rpartition(":")
                coll = (host or "127.0.0.1", int(port))
            elif coll is not None:
                coll = (coll[0], int(coll[1]))
            gpus = [
                GpuSlot(int(g["gpu_id"]), int(g["customer_id"]), int(g["rental_id"]),
                        _trace_source(g["trace"], base), g.get("gpu", "H100"), int(g.get("first_seq", 0)))
                for g in d["gpus"]
            ]
            return cls(
                node_id=int(d["node_id"]),
                gpus=gpus,
                curve=curve,
                collector=coll,
                period=d.get("period", DEFAULT_PERIOD_US),
                clock=Clock.parse(d.get("clock", "logical")),
                max_samples=int(d.get("max_samples", DEFAULT_MAX_SAMPLES)),
                queue_capacity=int(d.get("queue_capacity", DEFAULT_QUEUE_CAPACITY)),
                journal_dir=(base / d["journal_dir"]) if d.get("journal_dir") else None,
                epoch_us=d.get("epoch_us"),
                deliver_timeout=d.get("deliver_timeout", 120.0),
                catalog=catalog,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad node config: {exc!r}") from exc


def _trace_source(src, base: Path):
    if isinstance(src, str):
        return base / src
    if isinstance(src, dict) and src.get("kind") in ("file",):
        return base / src["path"]
    if isinstance(src, dict) and src.get("kind") == "distribution" and "path" in src:
        return {**src, "path": str(base / src["path"])}
    return src


def resolve_curve(spec, catalog: GpuCatalog, base: Path | None = None, strict: bool = True) -> FbpCurve:
    """A curve from a dict, a JSON file path, or notation such as ``"4, 5.06, 15"``."""
    if isinstance(spec, FbpCurve):
        return spec
    if isinstance(spec, dict):
        return FbpCurve.from_dict(spec)
    if isinstance(spec, (list, tuple)):
        return parse_notation(",".join(str(v) for v in spec), catalog, strict=strict)
    text = str(spec)
    p = (base / text) if base is not None else Path(text)
    if text.endswith(".json") or p.exists():
        return load_curve(p)
    return parse_notation(text, catalog, strict=strict)


def workload_trace(dist: JobDistribution, gpu, duration_us: float, seed) -> Trace:
    """Back-to-back jobs drawn from ``dist`` on ``gpu``, cut at ``duration_us``."""
    rng = np.random.default_rng(seed)
    parts, total = [], 0.0
    while total < duration_us:
        t = dist.jobs[sample_index(dist, rng)].trace_for(gpu)
        parts.append(t)
        total += t.total_duration
    full = Trace.concat(parts)
    ends = np.cumsum(full.durations)
    n = int(np.searchsorted(ends, duration_us, side="left")) + 1
    d = full.durations[:n].copy()
    d[-1] -= ends[n - 1] - duration_us
    if d[-1] <= 0:  # pragma: no cover - guarded by searchsorted
        n -= 1
        d = d[:n]
    return Trace(full.gpu, d, full.bw[:n], full.compute_util[:n], full.dram_util[:n], full.labels[:n])


@functools.lru_cache(maxsize=8)
def _distribution(path: str) -> JobDistribution:
    # shared across slots so each job trace is parsed once per process
    return load_distribution(path)


def _fixture_path() -> Path:
    from .workload.fixtures import fixture_path

    return fixture_path()


def materialize_trace(slot: GpuSlot, catalog: GpuCatalog) -> Trace:
    gpu = catalog[slot.gpu]
    src = slot.trace
    if isinstance(src, Trace):
        return src.check_gpu(gpu)
    if isinstance(src, (str, Path)):
        return read_trace(src, gpu)
    if not isinstance(src, dict):
        raise ConfigError(f"gpu {slot.gpu_id}: unsupported trace source {src!r}")
    kind = src.get("kind", "synthetic")
    if kind == "synthetic":
        return gen_synthetic_trace(src["spec"], gpu, src.get("seed", [slot.rental_id, slot.gpu_id]))
    if kind == "distribution":
        dist = _distribution(str(src.get("path") or _fixture_path()))
        return workload_trace(dist, gpu, float(src["duration_us"]), src.get("seed", [slot.rental_id, slot.gpu_id]))
    raise ConfigError(f"gpu {slot.gpu_id}: unknown trace kind {kind!r}")


# running ----------------------------------------------------------------------

@dataclass
class GpuStats:
    gpu_id: int
    customer_id: int
    rental_id: int
    samples: int = 0
    logs_sealed: int = 0
    amount_sealed: int = 0  # nanodollars, sum of sealed header amounts
    exact_total: float = 0.0  # unrounded nanodollars


@dataclass
class NodeStats:
    node_id: int
    gpus: dict[int, GpuStats] = field(default_factory=dict)
    logs_sent: int = 0
    retries: int = 0
    rejected: int = 0
    spilled: int = 0
    pending: int = 0
    status: int = 0
    error: str | None = None

    @property
    def amount_sealed(self) -> int:
        return sum(g.amount_sealed for g in self.gpus.values())

    @property
    def logs_sealed(self) -> int:
        return sum(g.logs_sealed for g in self.gpus.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gpus"] = [asdict(g) for g in self.gpus.values()]
        return d


KeyLookup = Callable[[int], bytes] | Mapping[int, bytes]


def _key_fn(keys: KeyLookup) -> Callable[[int], bytes]:
    return keys.__getitem__ if isinstance(keys, Mapping) else keys


def _sample_gpu(slot: GpuSlot, trace: Trace, cfg: NodeConfig, keys, outbox: Outbox,
                stats: GpuStats, tracker: SequenceTracker, t0: float, epoch: int, abort: threading.Event):
    key = keys(slot.customer_id)
    ticks = tick_samples(trace, cfg.period)
    exact = exact_charges(cfg.curve, ticks.bw, ticks.lengths)
    n = len(ticks.samples)
    seq = slot.first_seq
    for a in range(0, n, cfg.max_samples):
        if abort.is_set():
            return
        b = min(a + cfg.max_samples, n)
        if not cfg.clock.logical:
            end_us = a * cfg.period + float(ticks.lengths[a:b].sum())
            lag = t0 + cfg.clock.wall_seconds(end_us) - time.monotonic()
            if lag > 0:
                abort.wait(lag)
        start = epoch + a * cfg.period
        builder = open_log(slot.customer_id, slot.rental_id, cfg.node_id, slot.gpu_id, seq,
                           cfg.period, start, date=start, tracker=tracker)
        builder.extend(ticks.samples[a:b], rounded_increments(exact[a:b]))
        sealed = seal_log(builder, key, cfg.max_samples)
        header = builder.header
        outbox.put(slot.gpu_id, seq, encode_frame(frame_for(header, sealed, now_us())))
        stats.samples += b - a
        stats.logs_sealed += 1
        stats.amount_sealed += header.amount
        stats.exact_total += float(exact[a:b].sum())
        seq += 1


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("collector closed the connection")
        buf += chunk
    return bytes(buf)


def _send_loop(cfg: NodeConfig, outbox: Outbox, stats: NodeStats, sampling_done: threading.Event,
               abort: threading.Event):
    sock = None
    lo, hi = cfg.backoff
    delay = lo
    give_up_at = None
    try:
        while not abort.is_set():
            item = outbox.peek(timeout=0.05)
            if item is None:
                if sampling_done.is_set() and len(outbox) == 0:
                    return
                continue
            if cfg.collector is None:
                outbox.persist()
                if sampling_done.is_set():
                    return
                abort.wait(0.05)
                continue
            try:
                if sock is None:
                    sock = socket.create_connection(cfg.collector, timeout=10.0)
                    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sock.sendall(item.frame)
                ack = decode_ack(_recv_exact(sock, ACK_SIZE))
                if (ack.node_id, ack.gpu_id, ack.log_seq) != (cfg.node_id, item.gpu_id, item.log_seq):
                    raise ConnectionError(f"ack for the wrong log: {ack}")
            except (OSError, AgoraError) as exc:
                log.debug("node %s: send failed: %s", cfg.node_id, exc)
                if sock is not None:
                    sock.close()
                    sock = None
                outbox.persist()
                stats.retries += 1
                if sampling_done.is_set() and cfg.deliver_timeout is not None:
                    give_up_at = give_up_at or time.monotonic() + cfg.deliver_timeout
                    if time.monotonic() > give_up_at:
                        return
                abort.wait(delay)
                delay = min(delay * 2, hi)
                continue
            delay, give_up_at = lo, None
            if ack.ok:
                outbox.ack(item)
                stats.logs_sent += 1
            else:
                log.warning("node %s: collector rejected gpu %s log %s (status %s)",
                            cfg.node_id, item.gpu_id, item.log_seq, ack.status)
                outbox.reject(item)
                stats.rejected += 1
    finally:
        if sock is not None:
            sock.close()


def run_node(cfg: NodeConfig, keys: KeyLookup, abort: threading.Event | None = None,
             traces: Mapping[int, Trace] | None = None) -> NodeStats:
    """Run one node to completion; ``stats.status`` is 0 on success, 1 otherwise.

    ``traces`` optionally supplies already materialised traces by gpu id.
    """
    keys = _key_fn(keys)
    abort = abort or threading.Event()
    catalog = cfg.catalog or load_catalog()
    stats = NodeStats(cfg.node_id)
    tmp = None
    if cfg.journal_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix=f"agora-node{cfg.node_id}-")
        journal_dir = Path(tmp.name)
    else:
        journal_dir = Path(cfg.journal_dir)
    try:
        journal = SpillJournal(journal_dir, cfg.journal_bytes)
        outbox = Outbox(journal, cfg.queue_capacity)
        loaded = {s.gpu_id: (traces or {}).get(s.gpu_id) or materialize_trace(s, catalog) for s in cfg.gpus}
        for s in cfg.gpus:
            keys(s.customer_id)  # fail fast on missing keys
            stats.gpus[s.gpu_id] = GpuStats(s.gpu_id, s.customer_id, s.rental_id)
    except AgoraError as exc:
        if tmp is not None:
            tmp.cleanup()
        raise ConfigError(f"node {cfg.node_id}: {exc}") from exc

    tracker = SequenceTracker()
    epoch = now_us() if cfg.epoch_us is None else int(cfg.epoch_us)
    t0 = time.monotonic()
    sampling_done = threading.Event()
    errors: list[BaseException] = []

    def sampler(slot):
        try:
            _sample_gpu(slot, loaded[slot.gpu_id], cfg, keys, outbox, stats.gpus[slot.gpu_id],
                        tracker, t0, epoch, abort)
        except BaseException as exc:  # noqa: BLE001 - reported through stats
            errors.append(exc)
            abort.set()

    def sender_main():
        try:
            _send_loop(cfg, outbox, stats, sampling_done, abort)
        except BaseException as exc:  # noqa: BLE001 - reported through stats
            errors.append(exc)
            abort.set()

    samplers = [threading.Thread(target=sampler, args=(s,), name=f"n{cfg.node_id}g{s.gpu_id}", daemon=True)
                for s in cfg.gpus]
    sender = threading.Thread(target=sender_main, name=f"n{cfg.node_id}-send", daemon=True)
    sender.start()
    for t in samplers:
        t.start()
    for t in samplers:
        t.join()
    sampling_done.set()
    outbox.close()
    sender.join()

    stats.spilled = outbox.spilled
    stats.pending = len(outbox)
    if errors:
        stats.status, stats.error = 1, f"{type(errors[0]).__name__}: {errors[0]}"
    elif stats.pending:
        stats.status, stats.error = 1, f"{stats.pending} logs not acknowledged; kept in {journal_dir}"
    elif stats.rejected:
        stats.status, stats.error = 1, f"{stats.rejected} logs rejected by the collector"
    if tmp is not None and stats.pending == 0:
        tmp.cleanup()
    return stats


def load_node_config(path: str | Path) -> NodeConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load node config {path}: {exc}") from exc
    return NodeConfig.from_dict(data, base=path.parent)
