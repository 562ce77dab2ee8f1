"""Single-host emulation: one collector plus ``k`` node agents as threads."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .billing.keys import KeyStore
from .collector import CollectorServer, Invoice, LatencyRow, RollingStore, billing_export, latency_report
from .errors import ConfigError
from .node import DEFAULT_PERIOD_US, Clock, GpuSlot, NodeConfig, NodeStats, resolve_curve, run_node
from .billing.log import DEFAULT_MAX_SAMPLES
from .collector import DEFAULT_TRUNCATE_N
from .pricing import GpuCatalog, load_catalog


@dataclass
class EmulationConfig:
    """Fleet shape and workload.

    Every GPU replays ``duration_us`` of back-to-back jobs drawn from
    ``workload`` (the bundled fixture by default), seeded per GPU.  Customers
    are assigned round-robin over GPUs, one rental per (node, gpu).
    """

    nodes: int = 2
    gpus_per_node: int = 8
    customers: int = 4
    duration_us: float = 5_000_000
    period: int = DEFAULT_PERIOD_US
    clock: str = "logical"
    curve: object = "4, 5.06, 15"
    gpu: str = "H100"
    workload: str | None = None
    max_samples: int = DEFAULT_MAX_SAMPLES
    queue_capacity: int = 64
    truncate_n: int = DEFAULT_TRUNCATE_N
    restart_after_logs: int | None = None  # stop and restart the collector once it holds this many logs
    restart_pause: float = 0.2
    seed: int = 0
    label: str = ""
    host: str = "127.0.0.1"
    port: int = 0
    deliver_timeout: float = 120.0

    @classmethod
    def from_dict(cls, d: dict) -> "EmulationConfig":
        known = cls.__dataclass_fields__
        extra = set(d) - set(known)
        if extra:
            raise ConfigError(f"unknown emulation settings: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class EmulationResult:
    node_stats: list[NodeStats]
    invoices: list[Invoice]
    latency: list[LatencyRow]
    store: RollingStore
    restarts: int = 0
    elapsed: float = 0.0
    notes: list[str] = field(default_factory=list)

    @property
    def sealed_total(self) -> int:
        return sum(s.amount_sealed for s in self.node_stats)

    @property
    def invoiced_total(self) -> int:
        return sum(i.total for i in self.invoices)

    @property
    def conserved(self) -> bool:
        return self.sealed_total == self.invoiced_total

    def sealed_by_customer(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for s in self.node_stats:
            for g in s.gpus.values():
                out[g.customer_id] = out.get(g.customer_id, 0) + g.amount_sealed
        return out

    def invoiced_by_customer(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for i in self.invoices:
            out[i.customer_id] = out.get(i.customer_id, 0) + i.total
        return out

    @property
    def status(self) -> int:
        return 0 if self.conserved and all(s.status == 0 for s in self.node_stats) else 1

    def summary(self) -> dict:
        return {
            "nodes": len(self.node_stats),
            "streams": len(self.store.streams),
            "logs_stored": self.store.log_count(),
            "duplicates": self.store.duplicates,
            "restarts": self.restarts,
            "sealed_total_nd": self.sealed_total,
            "invoiced_total_nd": self.invoiced_total,
            "conserved": self.conserved,
            "sealed_by_customer": {str(k): v for k, v in sorted(self.sealed_by_customer().items())},
            "invoiced_by_customer": {str(k): v for k, v in sorted(self.invoiced_by_customer().items())},
            "retries": sum(s.retries for s in self.node_stats),
            "spilled": sum(s.spilled for s in self.node_stats),
            "gaps": sum(len(s.gaps) for s in self.store.streams.values()),
            "node_errors": {str(s.node_id): s.error for s in self.node_stats if s.error},
        }


def customer_of(cfg: EmulationConfig, node: int, gpu: int) -> int:
    return 1 + (node * cfg.gpus_per_node + gpu) % cfg.customers


def node_configs(cfg: EmulationConfig, address, workdir: Path, catalog: GpuCatalog) -> list[NodeConfig]:
    curve = resolve_curve(cfg.curve, catalog)
    clock = Clock.parse(cfg.clock)
    out = []
    for n in range(cfg.nodes):
        node_id = n + 1
        slots = []
        for g in range(cfg.gpus_per_node):
            src = {"kind": "distribution", "duration_us": cfg.duration_us, "seed": [cfg.seed, node_id, g]}
            if cfg.workload:
                src["path"] = cfg.workload
            slots.append(GpuSlot(g, customer_of(cfg, n, g), node_id * 100 + g, src, cfg.gpu))
        out.append(NodeConfig(
            node_id=node_id, gpus=slots, curve=curve, collector=address, period=cfg.period, clock=clock,
            max_samples=cfg.max_samples, queue_capacity=cfg.queue_capacity,
            journal_dir=workdir / "journal" / f"node_{node_id}", epoch_us=0 if clock.logical else None,
            deliver_timeout=cfg.deliver_timeout, catalog=catalog,
        ))
    return out


def provision_keys(cfg: EmulationConfig, key_dir: Path) -> KeyStore:
    keys = KeyStore(key_dir)
    for c in range(1, cfg.customers + 1):
        if not keys.path(c).exists():
            keys.provision(c)
    return keys


class LiveCollector:
    """The emulated collector; a restart reloads the store from disk like a fresh process.

    Hold ``lock`` while using :attr:`store` from another thread so a restart
    cannot swap it out underneath.
    """

    def __init__(self, root: Path, keys, cfg: EmulationConfig):
        self.root, self.keys, self.cfg = root, keys, cfg
        self.lock = threading.RLock()
        self.store = self._open()
        self.server = CollectorServer(self.store, keys, cfg.host, cfg.port).start()
        self.restarts = 0

    def _open(self) -> RollingStore:
        return RollingStore(self.root, n=self.cfg.truncate_n, run_label=self.cfg.label)

    def restart(self, pause: float = 0.0) -> None:
        with self.lock:
            self.server.stop()
            if pause:
                time.sleep(pause)
            self.store = self.server.store = self._open()
            self.server.start()
            self.restarts += 1

    def stop(self) -> None:
        self.server.stop()


def run_emulation(cfg: EmulationConfig, workdir: str | Path, catalog: GpuCatalog | None = None,
                  observer=None) -> EmulationResult:
    """Run the fleet to completion, then invoice every customer.

    ``observer(live, done)`` runs in its own thread while the nodes are
    running, e.g. to truncate or bill mid-run; ``live`` is the
    :class:`LiveCollector` and ``done`` is set when the nodes finish.
    Invoices it exports count towards the result.
    """
    if cfg.nodes < 1 or not 1 <= cfg.gpus_per_node <= 8 or cfg.customers < 1:
        raise ConfigError("need at least one node, 1-8 GPUs per node and one customer")
    workdir = Path(workdir)
    catalog = catalog or load_catalog()
    keys = provision_keys(cfg, workdir / "keys")
    live = LiveCollector(workdir / "store", keys, cfg)
    configs = node_configs(cfg, live.server.address, workdir, catalog)

    stats: list[NodeStats | None] = [None] * len(configs)
    errors: list[BaseException] = []
    done = threading.Event()

    def node_main(i, nc):
        try:
            stats[i] = run_node(nc, keys)
        except BaseException as exc:  # noqa: BLE001
            errors.append(exc)

    def supervisor():
        while not done.wait(0.02):
            if cfg.restart_after_logs is not None and live.restarts == 0 \
                    and live.store.log_count() >= cfg.restart_after_logs:
                live.restart(cfg.restart_pause)

    t0 = time.monotonic()
    threads = [threading.Thread(target=node_main, args=(i, nc), name=f"node{nc.node_id}", daemon=True)
               for i, nc in enumerate(configs)]
    helpers = [threading.Thread(target=supervisor, name="supervisor", daemon=True)]
    if observer is not None:
        helpers.append(threading.Thread(target=observer, args=(live, done), name="observer", daemon=True))
    for t in helpers:
        t.start()
    try:
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        done.set()
        for t in helpers:
            t.join()
        live.stop()
    if errors:
        raise errors[0]

    store = live.store
    for c in store.customers():
        billing_export(store, c)
    rows = latency_report(store.arrivals) if store.arrivals else []
    return EmulationResult(stats, list(store.invoices), rows, store, live.restarts, time.monotonic() - t0)


def host_commands(cfg: EmulationConfig, hosts: list[str], collector_host: str, port: int, out: str = "emulate-out") -> list[str]:
    """Shell commands to run the same fleet across machines, collector first."""
    if not hosts:
        raise ConfigError("no hosts given")
    cmds = [f"# on {collector_host}\nagora collector --listen 0.0.0.0:{port} --store {out}/store "
            f"--keys {out}/keys --truncate-n {cfg.truncate_n} --label {cfg.label or 'multi-host'}"]
    for n in range(cfg.nodes):
        host = hosts[n % len(hosts)]
        cmds.append(f"# on {host}\nagora node -c {out}/nodes/node_{n + 1}.json --keys {out}/keys")
    return cmds


def write_node_configs(cfg: EmulationConfig, out: Path, collector: str, catalog: GpuCatalog | None = None) -> list[Path]:
    """Per-node JSON configs matching :func:`node_configs`, for multi-host runs."""
    catalog = catalog or load_catalog()
    curve = resolve_curve(cfg.curve, catalog)
    paths = []
    (out / "nodes").mkdir(parents=True, exist_ok=True)
    for n in range(cfg.nodes):
        node_id = n + 1
        gpus = []
        for g in range(cfg.gpus_per_node):
            trace = {"kind": "distribution", "duration_us": cfg.duration_us, "seed": [cfg.seed, node_id, g]}
            if cfg.workload:
                trace["path"] = str(Path(cfg.workload).resolve())
            gpus.append({"gpu_id": g, "customer_id": customer_of(cfg, n, g), "rental_id": node_id * 100 + g,
                         "gpu": cfg.gpu, "trace": trace})
        d = {"node_id": node_id, "collector": collector, "period": cfg.period, "clock": cfg.clock,
             "curve": curve.to_dict(), "max_samples": cfg.max_samples, "queue_capacity": cfg.queue_capacity,
             "journal_dir": f"journal_{node_id}", "gpus": gpus}
        p = out / "nodes" / f"node_{node_id}.json"
        p.write_text(json.dumps(d, indent=2) + "\n")
        paths.append(p)
    return paths
