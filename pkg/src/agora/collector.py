"""Collector: ingest sealed logs, keep the rolling store, export invoices.

On-disk layout under the store root::

    customer_<id>/stream_<rental>_<node>_<gpu>/index.jsonl   append-only ops
    customer_<id>/stream_<rental>_<node>_<gpu>/logs/<seq>.bin sealed log bytes
    invoices/<customer>_<n>.json                             written before paid marks
    arrivals.jsonl                                           arrival log

Index ops are ``log`` (header fields), ``truncate`` (body removed) and
``paid`` (billed by an invoice).  Replaying the index rebuilds the store.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import socket
import socketserver
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .billing.frame import (
    ACK_AUTH_FAILURE,
    ACK_MALFORMED,
    ACK_OK,
    ACK_ROUTING_MISMATCH,
    ACK_UNKNOWN_CUSTOMER,
    Ack,
    WireFrame,
    encode_ack,
    read_frame,
)
from .billing.log import LogHeader, decrypt_log
from .errors import AuthFailure, EmptyInput, FrameError, Malformed, UnknownCustomer

log = logging.getLogger(__name__)

DEFAULT_TRUNCATE_N = 64
SECONDS_PER_YEAR = 31_536_000
PIB = 1024**5

StreamKey = tuple[int, int, int, int]  # customer, rental, node, gpu


@dataclass
class StoredLog:
    header: LogHeader
    body: bytes | None  # sealed bytes; None once truncated
    paid: bool = False
    invoice: str | None = None


@dataclass
class Stream:
    key: StreamKey
    logs: list[StoredLog] = field(default_factory=list)
    by_seq: dict[int, StoredLog] = field(default_factory=dict)
    gaps: list[tuple[int, int]] = field(default_factory=list)  # (expected, got)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def last_seq(self) -> int | None:
        return self.logs[-1].header.log_seq if self.logs else None


@dataclass(frozen=True)
class ArrivalRecord:
    stream: StreamKey
    log_seq: int
    nbytes: int
    send_ts: int  # µs
    arrival_ts: int  # µs
    run_label: str = ""
    duplicate: bool = False

    @property
    def latency(self) -> int:
        return self.arrival_ts - self.send_ts


@dataclass(frozen=True)
class LineItem:
    rental_id: int
    node_id: int
    gpu_id: int
    log_seq: int
    date: int
    amount: int  # nanodollars


@dataclass
class Invoice:
    invoice_id: str
    customer_id: int
    window: tuple[int, int]  # [t0, t1) in µs
    items: list[LineItem]

    @property
    def total(self) -> int:
        return sum(i.amount for i in self.items)

    def by_rental(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for i in self.items:
            out[i.rental_id] = out.get(i.rental_id, 0) + i.amount
        return out

    def to_dict(self) -> dict:
        return {
            "invoice_id": self.invoice_id,
            "customer_id": self.customer_id,
            "window": list(self.window),
            "total": self.total,
            "rentals": {str(k): v for k, v in sorted(self.by_rental().items())},
            "items": [asdict(i) for i in self.items],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Invoice":
        inv = cls(d["invoice_id"], int(d["customer_id"]), tuple(d["window"]), [LineItem(**i) for i in d["items"]])
        if "total" in d and d["total"] != inv.total:
            raise Malformed(f"invoice {inv.invoice_id}: total {d['total']} != sum of items {inv.total}")
        return inv

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["customer_id", "rental_id", "node_id", "gpu_id", "log_seq", "date_us", "amount_nd"])
        for i in self.items:
            w.writerow([self.customer_id, i.rental_id, i.node_id, i.gpu_id, i.log_seq, i.date, i.amount])
        return buf.getvalue()


def _header_dict(h: LogHeader) -> dict:
    return asdict(h)


class RollingStore:
    """Per-stream logs; bodies kept for the newest ``n`` logs, headers forever.

    With ``root=None`` the store lives in memory only.
    """

    def __init__(self, root: str | Path | None = None, n: int = DEFAULT_TRUNCATE_N, run_label: str = ""):
        if n < 0:
            raise ValueError("truncation threshold must be non-negative")
        self.n = n
        self.root = Path(root) if root is not None else None
        self.run_label = run_label
        self.streams: dict[StreamKey, Stream] = {}
        self.arrivals: list[ArrivalRecord] = []
        self.invoices: list[Invoice] = []
        self.duplicates = 0
        self._lock = threading.RLock()  # guards the stream map, arrivals and exports
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            self._load()

    # persistence -------------------------------------------------------------

    def _stream_dir(self, key: StreamKey) -> Path:
        c, r, n, g = key
        return self.root / f"customer_{c}" / f"stream_{r}_{n}_{g}"

    def _append_ops(self, key: StreamKey, ops: Iterable[dict]) -> None:
        if self.root is None:
            return
        d = self._stream_dir(key)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "index.jsonl", "a") as f:
            for op in ops:
                f.write(json.dumps(op, separators=(",", ":")) + "\n")

    def _load(self) -> None:
        for idx in sorted(self.root.glob("customer_*/stream_*/index.jsonl")):
            stream = None
            for line in idx.read_text().splitlines():
                if not line.strip():
                    continue
                try:
                    op = json.loads(line)
                except json.JSONDecodeError:
                    log.warning("%s: ignoring torn index line", idx)
                    break
                if op["op"] == "log":
                    h = LogHeader(**op["header"])
                    key = (h.customer_id, h.rental_id, h.node_id, h.gpu_id)
                    stream = stream or self.streams.setdefault(key, Stream(key))
                    if h.log_seq in stream.by_seq:
                        continue  # written twice across a restart
                    body_path = idx.parent / "logs" / f"{h.log_seq}.bin"
                    entry = StoredLog(h, body_path.read_bytes() if body_path.exists() else None)
                    self._link(stream, entry)
                elif op["op"] == "truncate":
                    stream.by_seq[op["seq"]].body = None
                elif op["op"] == "paid":
                    e = stream.by_seq[op["seq"]]
                    e.paid, e.invoice = True, op.get("invoice")
        inv_dir = self.root / "invoices"
        for p in sorted(inv_dir.glob("*.json")) if inv_dir.exists() else []:
            inv = Invoice.from_dict(json.loads(p.read_text()))
            self.invoices.append(inv)
            self._apply_paid(inv)  # finish an export interrupted after its write-ahead
        arr = self.root / "arrivals.jsonl"
        if arr.exists():
            for line in arr.read_text().splitlines():
                if line.strip():
                    d = json.loads(line)
                    d["stream"] = tuple(d["stream"])
                    self.arrivals.append(ArrivalRecord(**d))

    def _link(self, stream: Stream, entry: StoredLog) -> None:
        seq = entry.header.log_seq
        last = stream.last_seq
        if last is not None and seq != last + 1:
            stream.gaps.append((last + 1, seq))
        stream.logs.append(entry)
        stream.by_seq[seq] = entry

    # ingestion ---------------------------------------------------------------

    def stream(self, key: StreamKey) -> Stream:
        with self._lock:
            s = self.streams.get(key)
            if s is None:
                s = self.streams[key] = Stream(key)
            return s

    def add(self, header: LogHeader, sealed: bytes) -> bool:
        """Store a verified log; returns False for a duplicate."""
        key = (header.customer_id, header.rental_id, header.node_id, header.gpu_id)
        s = self.stream(key)
        with s.lock:
            if header.log_seq in s.by_seq:
                with self._lock:
                    self.duplicates += 1
                return False
            if self.root is not None:
                logs = self._stream_dir(key) / "logs"
                logs.mkdir(parents=True, exist_ok=True)
                (logs / f"{header.log_seq}.bin").write_bytes(sealed)
            self._append_ops(key, [{"op": "log", "header": _header_dict(header)}])
            self._link(s, StoredLog(header, sealed))
            self._truncate_locked(s)
        return True

    def record_arrival(self, rec: ArrivalRecord) -> None:
        with self._lock:
            self.arrivals.append(rec)
            if self.root is not None:
                d = asdict(rec)
                with open(self.root / "arrivals.jsonl", "a") as f:
                    f.write(json.dumps(d, separators=(",", ":")) + "\n")

    # truncation --------------------------------------------------------------

    def _truncate_locked(self, s: Stream, n: int | None = None) -> int:
        n = self.n if n is None else n
        keep_from = max(0, len(s.logs) - n)
        cut = [e for e in s.logs[:keep_from] if e.body is not None]
        if not cut:
            return 0
        self._append_ops(s.key, [{"op": "truncate", "seq": e.header.log_seq} for e in cut])
        for e in cut:
            e.body = None
            if self.root is not None:
                (self._stream_dir(s.key) / "logs" / f"{e.header.log_seq}.bin").unlink(missing_ok=True)
        return len(cut)

    def truncate(self, key: StreamKey, n: int | None = None) -> int:
        s = self.streams.get(key)
        if s is None:
            return 0
        with s.lock:
            return self._truncate_locked(s, n)

    # billing -----------------------------------------------------------------

    def _apply_paid(self, inv: Invoice) -> None:
        for it in inv.items:
            s = self.streams.get((inv.customer_id, it.rental_id, it.node_id, it.gpu_id))
            if s is None:
                continue
            e = s.by_seq.get(it.log_seq)
            if e is not None and not e.paid:
                e.paid, e.invoice = True, inv.invoice_id
                self._append_ops(s.key, [{"op": "paid", "seq": it.log_seq, "invoice": inv.invoice_id}])

    def export(self, customer_id: int, window: tuple[int, int] | None = None, mark_paid: bool = True) -> Invoice:
        t0, t1 = window if window is not None else (0, 2**64)
        if t1 < t0:
            raise ValueError(f"bad billing window [{t0}, {t1})")
        with self._lock:
            streams = [s for k, s in sorted(self.streams.items()) if k[0] == customer_id]
            for s in streams:
                s.lock.acquire()
            try:
                items = [
                    LineItem(e.header.rental_id, e.header.node_id, e.header.gpu_id, e.header.log_seq,
                             e.header.date, e.header.amount)
                    for s in streams
                    for e in s.logs
                    if not e.paid and t0 <= e.header.date < t1
                ]
                n_prev = sum(1 for i in self.invoices if i.customer_id == customer_id)
                inv = Invoice(f"{customer_id}_{n_prev:06d}", customer_id, (t0, t1), items)
                if mark_paid and items:
                    if self.root is not None:
                        d = self.root / "invoices"
                        d.mkdir(exist_ok=True)
                        tmp = d / f"{inv.invoice_id}.json.tmp"
                        tmp.write_text(inv.to_json())
                        tmp.replace(d / f"{inv.invoice_id}.json")
                    self.invoices.append(inv)
                    self._apply_paid(inv)
                return inv
            finally:
                for s in streams:
                    s.lock.release()

    def customers(self) -> list[int]:
        with self._lock:
            return sorted({k[0] for k in self.streams})

    def log_count(self) -> int:
        with self._lock:
            return sum(len(s.logs) for s in self.streams.values())

    def total_amount(self, customer_id: int | None = None) -> int:
        with self._lock:
            return sum(e.header.amount for k, s in self.streams.items() for e in s.logs
                       if customer_id is None or k[0] == customer_id)


KeyLookup = Callable[[int], bytes] | Mapping[int, bytes]


def ingest_frame(store: RollingStore, frame: WireFrame, keys: KeyLookup, arrival_ts: int | None = None,
                 nbytes: int = 0) -> Ack:
    """Verify and store one frame, returning the ack to send back."""
    arrival_ts = time.time_ns() // 1000 if arrival_ts is None else arrival_ts
    lookup = keys.__getitem__ if isinstance(keys, Mapping) else keys
    nack = lambda status: Ack(frame.node_id, frame.gpu_id, frame.log_seq, status)  # noqa: E731
    try:
        key = lookup(frame.customer_id)
    except (KeyError, UnknownCustomer):
        return nack(ACK_UNKNOWN_CUSTOMER)
    try:
        header, _ = decrypt_log(frame.sealed, key)
    except AuthFailure:
        return nack(ACK_AUTH_FAILURE)
    except Malformed:
        return nack(ACK_MALFORMED)
    if (header.customer_id, header.rental_id, header.node_id, header.gpu_id, header.log_seq) != (
        frame.customer_id, frame.rental_id, frame.node_id, frame.gpu_id, frame.log_seq
    ):
        return nack(ACK_ROUTING_MISMATCH)
    fresh = store.add(header, frame.sealed.to_bytes())
    store.record_arrival(ArrivalRecord(frame.stream, frame.log_seq, nbytes, frame.send_ts, arrival_ts,
                                       store.run_label, not fresh))
    return Ack(frame.node_id, frame.gpu_id, frame.log_seq, ACK_OK)


def truncate_rolling(store: RollingStore, key: StreamKey, n: int | None = None) -> int:
    return store.truncate(key, n)


def billing_export(store: RollingStore, customer_id: int, window: tuple[int, int] | None = None,
                   mark_paid: bool = True) -> Invoice:
    """Invoice the unpaid logs dated in ``window``; marks them paid unless ``mark_paid`` is False."""
    return store.export(customer_id, window, mark_paid)


# server -------------------------------------------------------------------------

class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        srv: CollectorServer = self.server.owner
        try:
            while True:
                try:
                    frame = read_frame(self.rfile)
                except (FrameError, Malformed) as exc:
                    log.warning("collector: dropping connection from %s: %s", self.client_address, exc)
                    return
                if frame is None:
                    return
                arrival = time.time_ns() // 1000
                nbytes = len(frame.sealed) + 8
                ack = ingest_frame(srv.store, frame, srv.keys, arrival, nbytes)
                self.wfile.write(encode_ack(ack))
                self.wfile.flush()
        except OSError:
            return
        finally:
            srv._unregister(self.connection)


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True  # server_close() waits for in-flight handlers
    request_queue_size = 128

    def process_request(self, request, client_address):
        # registered on the accept thread so stop() can always reach it
        self.owner._register(request)
        super().process_request(request, client_address)


class CollectorServer:
    """TCP front end for a :class:`RollingStore`; can be stopped and started again."""

    def __init__(self, store: RollingStore, keys: KeyLookup, host: str = "127.0.0.1", port: int = 0):
        self.store = store
        self.keys = keys
        self.host, self.port = host, port
        self._server: _TCPServer | None = None
        self._thread: threading.Thread | None = None
        self._conns: set = set()
        self._conn_lock = threading.Lock()

    def _register(self, conn):
        with self._conn_lock:
            self._conns.add(conn)

    def _unregister(self, conn):
        with self._conn_lock:
            self._conns.discard(conn)

    @property
    def address(self) -> tuple[str, int]:
        return (self.host, self.port)

    @property
    def running(self) -> bool:
        return self._server is not None

    def start(self) -> "CollectorServer":
        if self._server is not None:
            return self
        self._server = _TCPServer((self.host, self.port), _Handler)
        self._server.owner = self
        self.port = self._server.server_address[1]
        self._thread = threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.05},
                                        name="collector", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        """Stop accepting and drop live connections, as a crash would."""
        if self._server is None:
            return
        self._server.shutdown()
        with self._conn_lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        self._server.server_close()
        self._thread.join()
        self._server = self._thread = None

    def restart(self, pause: float = 0.0) -> None:
        self.stop()
        if pause:
            time.sleep(pause)
        self.start()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


# capacity and latency ------------------------------------------------------------

@dataclass(frozen=True)
class CapacityEstimate:
    bytes_per_second: float
    bits_per_second: float
    bytes_per_year: float

    @property
    def gbit_per_second(self) -> float:
        return self.bits_per_second / 1e9

    @property
    def pib_per_year(self) -> float:
        return self.bytes_per_year / PIB

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(gbit_per_second=self.gbit_per_second, pib_per_year=self.pib_per_year)
        return d


def estimate_capacity(nodes: int, gpus_per_node: int, period_us: float, sample_bytes: int) -> CapacityEstimate:
    """Raw telemetry volume for a fleet sampling every ``period_us``."""
    for name, v in (("nodes", nodes), ("gpus_per_node", gpus_per_node), ("period", period_us), ("sample_bytes", sample_bytes)):
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v}")
    bps = nodes * gpus_per_node * (1e6 / period_us) * sample_bytes
    return CapacityEstimate(bps, bps * 8, bps * SECONDS_PER_YEAR)


def format_bytes_rate(bps: float) -> str:
    for unit, scale in (("GB/s", 1e9), ("MB/s", 1e6), ("kB/s", 1e3)):
        if bps >= scale:
            return f"{bps / scale:.3g} {unit}"
    return f"{bps:g} B/s"


def format_capacity(c: CapacityEstimate) -> str:
    return (f"{format_bytes_rate(c.bytes_per_second)}, ≈{c.gbit_per_second:.3g} Gbit/s, "
            f"≈{c.pib_per_year:.3g} PiB/year")


@dataclass(frozen=True)
class LatencyRow:
    run_label: str
    count: int
    min_us: float
    mean_us: float
    p50_us: float
    p99_us: float
    max_us: float


LATENCY_COLUMNS = ["run_label", "count", "min_us", "mean_us", "p50_us", "p99_us", "max_us"]


def nearest_rank(sorted_values, p: float):
    """Smallest value with at least ``p`` percent of the data at or below it."""
    n = len(sorted_values)
    rank = max(1, math.ceil(p / 100.0 * n))
    return sorted_values[rank - 1]


def latency_report(arrivals: Iterable[ArrivalRecord]) -> list[LatencyRow]:
    groups: dict[str, list[int]] = {}
    for a in arrivals:
        groups.setdefault(a.run_label, []).append(a.latency)
    if not groups:
        raise EmptyInput("no arrivals to report")
    rows = []
    for label in sorted(groups):
        v = sorted(groups[label])
        rows.append(LatencyRow(label, len(v), float(v[0]), math.fsum(v) / len(v),
                               float(nearest_rank(v, 50)), float(nearest_rank(v, 99)), float(v[-1])))
    return rows


def latency_csv(rows: Iterable[LatencyRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LATENCY_COLUMNS)
    for r in rows:
        w.writerow([r.run_label, r.count, repr(r.min_us), repr(r.mean_us), repr(r.p50_us), repr(r.p99_us), repr(r.max_us)])
    return buf.getvalue()
