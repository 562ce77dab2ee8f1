"""Command-line entry point.

Exit status: 0 on success, 1 on a runtime failure, 2 on a configuration or
usage error.  Every command writes ``manifest.json`` into ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from . import __version__
from .billing.keys import KEY_DIR_ENV, KeyStore
from .collector import (
    CollectorServer,
    RollingStore,
    billing_export,
    estimate_capacity,
    format_capacity,
    latency_csv,
    latency_report,
)
from .econ import (
    DEFAULT_N_JOBS,
    SWEEP_PERIODS_US,
    WINDOW_AVERAGE,
    emit_report,
    run_experiment,
    sampling_error_sweep,
)
from .emulate import EmulationConfig, host_commands, run_emulation, write_node_configs
from .errors import (
    AgoraError,
    BadArgs,
    BadBreakpoints,
    BadSpec,
    BwExceedsGpu,
    ConfigError,
    EmptyTrace,
    Malformed,
    NonMonotone,
    OutOfDomain,
    UnknownCustomer,
)
from .node import load_node_config, resolve_curve, run_node
from .pricing import load_catalog, validate_desiderata
from .workload.formats import write_trace
from .workload.jobs import llm_distribution, load_distribution
from .workload.llm import llm_decode_trace, load_model
from .workload.synthetic import SyntheticSpec, gen_synthetic_trace

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
CONFIG_ERRORS = (ConfigError, BadSpec, BadArgs, NonMonotone, BadBreakpoints, Malformed, EmptyTrace,
                 BwExceedsGpu, OutOfDomain, UnknownCustomer, FileNotFoundError)

log = logging.getLogger("agora")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# helpers ------------------------------------------------------------------------

def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _write(out: Path, name: str, data: str | bytes) -> Path:
    p = out / name
    p.write_bytes(data if isinstance(data, bytes) else data.encode())
    return p


def _manifest(args, out: Path, outputs: list[Path], config: dict | None = None) -> None:
    m = {
        "subcommand": args.cmd,
        "version": __version__,
        "config_paths": [str(p) for p in getattr(args, "config_paths", [])],
        "config": config,
        "seed": args.seed,
        "out": str(out),
        "label": args.label,
        "outputs": sorted(p.name for p in outputs),
    }
    (out / "manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")


def _distribution(spec, base: Path):
    if spec in (None, "fixture"):
        from .workload.fixtures import load_fixture

        return load_fixture()
    if isinstance(spec, dict) and "llm" in spec:
        return llm_distribution(**spec["llm"])
    return load_distribution(base / spec)


def _econ_setup(args):
    cfg = {}
    base = Path(".")
    if args.config:
        cfg = _read_json(args.config)
        base = Path(args.config).parent
        args.config_paths = [args.config]
    for key in ("curve", "distribution", "reference_gpu", "n_jobs", "catalog"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    catalog = load_catalog(base / cfg["catalog"]) if cfg.get("catalog") else load_catalog()
    curve = resolve_curve(cfg.get("curve", "4, 5.06, 15"), catalog, base)
    dist = _distribution(cfg.get("distribution"), base)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    cfg["seed"] = args.seed = seed
    return cfg, catalog, curve, dist


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# commands -----------------------------------------------------------------------

def cmd_econ(args) -> int:
    cfg, catalog, curve, dist = _econ_setup(args)
    out = _out(args)
    report = run_experiment(dist, curve, catalog, cfg.get("reference_gpu", "H100"),
                            int(cfg.get("n_jobs", DEFAULT_N_JOBS)), cfg["seed"], cfg.get("tbp_gpus"))
    outputs = [_write(out, "report.csv", emit_report(report, "csv")),
               _write(out, "report.json", emit_report(report, "json"))]
    if not args.no_plots:
        from .plotting import plot_revenue

        outputs.append(plot_revenue(report, out / "revenue.png"))
    _manifest(args, out, outputs, cfg)
    print(f"mean FBP ${report.mean_fbp:.6g}/job, F% {report.f_percent:.2f} -> {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, catalog, curve, dist = _econ_setup(args)
    if args.periods:
        cfg["periods"] = [float(p) for p in args.periods.split(",") if p.strip()]
    periods = cfg.get("periods", list(SWEEP_PERIODS_US))
    if not periods:
        raise ConfigError("periods list is empty")
    out = _out(args)
    rows = sampling_error_sweep(dist, curve, catalog, cfg.get("reference_gpu", "H100"), periods,
                                int(cfg.get("n_jobs", DEFAULT_N_JOBS)), cfg["seed"], cfg.get("mode", WINDOW_AVERAGE))
    outputs = [_write(out, "sweep.csv", emit_report(rows, "csv")),
               _write(out, "sweep.json", emit_report(rows, "json"))]
    if not args.no_plots:
        from .plotting import plot_sweep

        outputs.append(plot_sweep(rows, out / "sweep.png"))
    _manifest(args, out, outputs, cfg)
    for r in rows:
        print(f"{r.period_us:>8g} us  {r.percent_error:+.3f}%")
    return EXIT_OK


def cmd_emulate(args) -> int:
    d = {}
    if args.config:
        d = _read_json(args.config)
        args.config_paths = [args.config]
    for flag, key in (("nodes", "nodes"), ("gpus", "gpus_per_node"), ("customers", "customers"),
                      ("duration_us", "duration_us"), ("period", "period"), ("clock", "clock"),
                      ("curve", "curve"), ("max_samples", "max_samples"), ("truncate_n", "truncate_n"),
                      ("restart_after_logs", "restart_after_logs"), ("workload", "workload"), ("port", "port")):
        v = getattr(args, flag)
        if v is not None:
            d[key] = v
    d["seed"] = args.seed if args.seed is not None else d.get("seed", 0)
    args.seed = d["seed"]
    if args.label:
        d["label"] = args.label
    cfg = EmulationConfig.from_dict(d)
    out = _out(args)

    if args.hosts:
        hosts = [h for h in args.hosts.split(",") if h]
        port = cfg.port or 7400
        paths = write_node_configs(cfg, out, f"{args.collector_host}:{port}")
        cmds = host_commands(cfg, hosts, args.collector_host, port, str(out))
        text = "\n\n".join(cmds) + "\n"
        outputs = paths + [_write(out, "commands.sh", text)]
        print(text, end="")
        _manifest(args, out, outputs, cfg.to_dict())
        return EXIT_OK

    result = run_emulation(cfg, out)
    outputs = [_write(out, "summary.json", json.dumps(result.summary(), indent=2, sort_keys=True) + "\n"),
               _write(out, "node_stats.json", json.dumps([s.to_dict() for s in result.node_stats], indent=2) + "\n")]
    if result.latency:
        outputs.append(_write(out, "latency.csv", latency_csv(result.latency)))
    inv_dir = out / "invoices"
    inv_dir.mkdir(exist_ok=True)
    for inv in result.invoices:
        (inv_dir / f"invoice_{inv.invoice_id}.csv").write_text(inv.to_csv())
        (inv_dir / f"invoice_{inv.invoice_id}.json").write_text(inv.to_json())
    if not args.no_plots and result.store.arrivals:
        from .plotting import plot_latency

        outputs.append(plot_latency(result.store.arrivals, out / "latency.png"))
    _manifest(args, out, outputs, cfg.to_dict())
    s = result.summary()
    print(f"{s['streams']} streams, {s['logs_stored']} logs, sealed {s['sealed_total_nd']} nd, "
          f"invoiced {s['invoiced_total_nd']} nd, conserved={s['conserved']}")
    return EXIT_OK if result.status == 0 else EXIT_FAIL


def cmd_capacity(args) -> int:
    try:
        c = estimate_capacity(args.nodes, args.gpus, args.period, args.bytes)
    except ValueError as exc:
        raise BadArgs(str(exc)) from exc
    out = _out(args)
    outputs = [_write(out, "capacity.json", json.dumps(c.to_dict(), indent=2, sort_keys=True) + "\n")]
    _manifest(args, out, outputs, {"nodes": args.nodes, "gpus": args.gpus, "period": args.period, "bytes": args.bytes})
    print(format_capacity(c))
    return EXIT_OK


def cmd_gen_traces(args) -> int:
    out = _out(args)
    catalog = load_catalog()
    outputs: list[Path] = []
    seed = args.seed if args.seed is not None else 0
    args.seed = seed
    config = {"kind": args.kind}
    if args.kind == "fixture":
        from .workload.fixtures import write_fixture

        outputs.append(write_fixture(out / "fixture", catalog, seed=args.fixture_seed))
        config["fixture_seed"] = args.fixture_seed
    elif args.kind == "synthetic":
        if not args.spec:
            raise BadArgs("--spec is required for synthetic traces")
        spec = SyntheticSpec.from_dict(_read_json(args.spec))
        args.config_paths = [args.spec]
        for i in range(args.count):
            t = gen_synthetic_trace(spec, catalog[args.gpu], [seed, i])
            outputs.append(write_trace(t, out / f"synthetic_{i}_{args.gpu}.{args.format}"))
        config.update(gpu=args.gpu, count=args.count)
    else:
        if not args.model:
            raise BadArgs("--model is required for llm traces")
        model = load_model(args.model)
        t = llm_decode_trace(model, catalog[args.gpu], args.batch, args.context, args.output_tokens)
        outputs.append(write_trace(t, out / f"{model.name}_b{args.batch}_c{args.context}_{args.gpu}.csv"))
        config.update(model=args.model, gpu=args.gpu, batch=args.batch, context=args.context)
    _manifest(args, out, outputs, config)
    print(f"wrote {len(outputs)} file(s) to {out}")
    return EXIT_OK


def cmd_validate_curve(args) -> int:
    catalog = load_catalog(args.catalog) if args.catalog else load_catalog()
    curve = resolve_curve(args.curve, catalog, strict=False)
    report = validate_desiderata(curve, catalog)
    out = _out(args)
    d = {"curve": str(curve), "ok": report.ok, "monotone": report.monotone, "caps_respected": report.caps_respected,
         "convex": report.convex, "violations": report.violations, "warnings": report.warnings}
    outputs = [_write(out, "validation.json", json.dumps(d, indent=2, sort_keys=True) + "\n")]
    if not args.no_plots:
        from .plotting import plot_curve

        outputs.append(plot_curve(curve, catalog, out / "curve.png"))
    _manifest(args, out, outputs, {"curve": args.curve})
    print(json.dumps(d, indent=2))
    return EXIT_OK if report.ok else EXIT_FAIL


def _window(args):
    if args.window is None:
        return None
    t0, t1 = args.window
    if t1 < t0:
        raise BadArgs("window end precedes its start")
    return (t0, t1)


def cmd_bill(args) -> int:
    store_dir = Path(args.store)
    if not store_dir.is_dir():
        raise ConfigError(f"store directory {store_dir} does not exist")
    store = RollingStore(store_dir)
    out = _out(args)
    customers = [args.customer] if args.customer is not None else store.customers()
    outputs = []
    for c in customers:
        inv = billing_export(store, c, _window(args), mark_paid=not args.preview)
        outputs.append(_write(out, f"invoice_{c}.json", inv.to_json()))
        outputs.append(_write(out, f"invoice_{c}.csv", inv.to_csv()))
        print(f"customer {c}: {len(inv.items)} logs, total {inv.total} nd (${inv.total / 1e9:.6f})")
    _manifest(args, out, outputs, {"store": str(store_dir), "customer": args.customer, "window": args.window,
                                   "preview": args.preview})
    return EXIT_OK


def _wait_for_signal(timeout: float | None) -> None:
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait(timeout)


def cmd_collector(args) -> int:
    host, _, port = args.listen.rpartition(":")
    keys = KeyStore(args.keys)
    store = RollingStore(args.store, n=args.truncate_n, run_label=args.label or "")
    out = _out(args)
    with CollectorServer(store, keys, host or "127.0.0.1", int(port)) as srv:
        print(f"collector listening on {srv.address[0]}:{srv.address[1]}", flush=True)
        _wait_for_signal(args.duration)
    outputs = []
    if store.arrivals:
        outputs.append(_write(out, "latency.csv", latency_csv(latency_report(store.arrivals))))
    _manifest(args, out, outputs, {"listen": args.listen, "store": args.store, "truncate_n": args.truncate_n})
    return EXIT_OK


def cmd_node(args) -> int:
    cfg = load_node_config(args.config)
    args.config_paths = [args.config]
    if args.collector:
        host, _, port = args.collector.rpartition(":")
        cfg.collector = (host or "127.0.0.1", int(port))
    stats = run_node(cfg, KeyStore(args.keys))
    out = _out(args)
    outputs = [_write(out, f"node_{cfg.node_id}_stats.json", json.dumps(stats.to_dict(), indent=2) + "\n")]
    _manifest(args, out, outputs, {"node_id": cfg.node_id})
    print(f"node {cfg.node_id}: {stats.logs_sealed} logs sealed, {stats.logs_sent} sent, "
          f"{stats.retries} retries, amount {stats.amount_sealed} nd")
    if stats.error:
        print(f"node {cfg.node_id}: {stats.error}", file=sys.stderr)
    return stats.status


# parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (default: config value or 0)")
    common.add_argument("--out", default="agora-out", help="output directory")
    common.add_argument("--label", default="", help="run label recorded in outputs")
    common.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="agora", description="Feature-based GPU pricing: experiments, node agents and collector.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def econ_args(sp):
        sp.add_argument("-c", "--config", help="experiment JSON")
        sp.add_argument("--curve", help="curve notation such as '4, 5.06, 15' or a curve JSON file")
        sp.add_argument("--distribution", help="job distribution JSON (default: bundled fixture)")
        sp.add_argument("--reference-gpu", dest="reference_gpu")
        sp.add_argument("--n-jobs", dest="n_jobs", type=int)
        sp.add_argument("--catalog", help="GPU catalog JSON")

    sp = sub.add_parser("econ", parents=[common], help="revenue experiment (FBP vs TBP)")
    econ_args(sp)
    sp.set_defaults(func=cmd_econ)

    sp = sub.add_parser("sweep", parents=[common], help="sampling-period error sweep")
    econ_args(sp)
    sp.add_argument("--periods", help="comma-separated periods in µs")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("emulate", parents=[common], help="collector plus node agents on this host")
    sp.add_argument("-c", "--config", help="emulation JSON")
    sp.add_argument("--nodes", type=int)
    sp.add_argument("--gpus", type=int)
    sp.add_argument("--customers", type=int)
    sp.add_argument("--duration-us", dest="duration_us", type=float)
    sp.add_argument("--period", type=int)
    sp.add_argument("--clock", help="logical, realtime or accelerated:<factor>")
    sp.add_argument("--curve")
    sp.add_argument("--max-samples", dest="max_samples", type=int)
    sp.add_argument("--truncate-n", dest="truncate_n", type=int)
    sp.add_argument("--restart-after-logs", dest="restart_after_logs", type=int)
    sp.add_argument("--workload", help="job distribution JSON for the traces")
    sp.add_argument("--port", type=int)
    sp.add_argument("--hosts", help="comma-separated node hosts; prints per-host commands instead of running")
    sp.add_argument("--collector-host", dest="collector_host", default="127.0.0.1")
    sp.set_defaults(func=cmd_emulate)

    sp = sub.add_parser("capacity", parents=[common], help="telemetry volume estimate")
    sp.add_argument("nodes", type=int)
    sp.add_argument("gpus", type=int)
    sp.add_argument("period", type=float, help="sampling period in µs")
    sp.add_argument("bytes", type=int, help="bytes per sample")
    sp.set_defaults(func=cmd_capacity)

    sp = sub.add_parser("gen-traces", parents=[common], help="write synthetic, LLM or fixture traces")
    sp.add_argument("--kind", choices=["synthetic", "llm", "fixture"], default="synthetic")
    sp.add_argument("--spec", help="synthetic spec JSON")
    sp.add_argument("--gpu", default="H100")
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--format", choices=["csv", "atrc"], default="csv")
    sp.add_argument("--model")
    sp.add_argument("--batch", type=int, default=64)
    sp.add_argument("--context", type=int, default=1024)
    sp.add_argument("--output-tokens", dest="output_tokens", type=int, default=128)
    sp.add_argument("--fixture-seed", dest="fixture_seed", type=int, default=2025)
    sp.set_defaults(func=cmd_gen_traces)

    sp = sub.add_parser("validate-curve", parents=[common], help="check a curve against the desiderata")
    sp.add_argument("curve", help="notation such as '4, 5.06, 15' or a curve JSON file")
    sp.add_argument("--catalog")
    sp.set_defaults(func=cmd_validate_curve)

    sp = sub.add_parser("bill", parents=[common], help="export invoices from a collector store")
    sp.add_argument("--store", required=True)
    sp.add_argument("--customer", type=int)
    sp.add_argument("--window", type=int, nargs=2, metavar=("T0_US", "T1_US"))
    sp.add_argument("--preview", action="store_true", help="do not mark logs paid")
    sp.set_defaults(func=cmd_bill)

    sp = sub.add_parser("collector", parents=[common], help="run the collector server")
    sp.add_argument("--listen", default="127.0.0.1:7400")
    sp.add_argument("--store", required=True)
    sp.add_argument("--keys", default=None, help=f"key directory (default: ${KEY_DIR_ENV})")
    sp.add_argument("--truncate-n", dest="truncate_n", type=int, default=64)
    sp.add_argument("--duration", type=float, default=None, help="stop after this many seconds")
    sp.set_defaults(func=cmd_collector)

    sp = sub.add_parser("node", parents=[common], help="run one node agent")
    sp.add_argument("-c", "--config", required=True)
    sp.add_argument("--keys", default=None, help=f"key directory (default: ${KEY_DIR_ENV})")
    sp.add_argument("--collector", help="override collector host:port")
    sp.set_defaults(func=cmd_node)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"agora: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    args.config_paths = []
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"agora {args.cmd}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AgoraError, OSError) as exc:
        print(f"agora {args.cmd}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
