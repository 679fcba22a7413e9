"""Command-line entry points.

    svs run        run an experiment and write a run directory
    svs report     re-render a run directory without re-running
    svs bench-pcp  notification latency benchmark for one anomaly kind
    svs serve      host the cloud services on a TCP port
    svs subscribe  end-user notification client

Exit codes: 0 success, 1 usage, 2 invalid config or scenario, 3 runtime
failure, 4 strict-mode violation.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

from svs.clock import REAL, VIRTUAL
from svs.experiment import CAMERA_PRESETS, ConfigError, ExperimentConfig, bundled_config_path, load_config, run_experiment
from svs.scenario import BATCH_SIZE, BEHAVIORAL_ANOMALY, OBJECT_ANOMALY, Scenario, ScenarioError, bundled_scenario_path, load_scenario
from svs.telemetry import (
    CSV_KIND_LABEL,
    PCP_KIND_FOR,
    RecordsError,
    describe,
    dump_records,
    load_records,
    render_report,
)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME, EXIT_STRICT = 0, 1, 2, 3, 4

KIND_ARG = {"object": OBJECT_ANOMALY, "behavior": BEHAVIORAL_ANOMALY}
TOPIC_ARG = {"object": "object-anomaly", "behavior": "behavioral-anomaly"}

log = logging.getLogger("svs")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which is our config code
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# argument resolution

def resolve_scenario(arg: str) -> Scenario:
    """A path, or the name of a bundled scenario."""
    path = Path(arg)
    if not path.exists() and bundled_scenario_path(arg).exists():
        path = bundled_scenario_path(arg)
    return load_scenario(path)


def resolve_config(arg: str | None, default: str) -> ExperimentConfig:
    name = arg or default
    path = Path(name)
    if not path.exists() and bundled_config_path(name).exists():
        path = bundled_config_path(name)
    return load_config(path)


def _cameras(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"camera count must be an integer, got {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("camera count must be at least 1")
    return n


# ---------------------------------------------------------------------------
# run / report

RECORDS, REPORT_JSON, REPORT_TXT, CONFIG_JSON = "records.jsonl", "report.json", "report.txt", "config.json"


def write_run_dir(out: Path, result, config: ExperimentConfig, force: bool = False) -> None:
    """Write the run directory atomically: all files appear together or not at all."""
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} exists and is not empty (use --force to replace it)")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        with open(tmp / RECORDS, "w", encoding="utf-8") as fh:
            dump_records(fh, result.record_params(), result.records, result.pcp)
        (tmp / REPORT_JSON).write_text(render_report(result.report, "json"), encoding="utf-8")
        (tmp / REPORT_TXT).write_text(render_report(result.report, "table"), encoding="utf-8")
        (tmp / CONFIG_JSON).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if out.exists():
            old = out.with_name(f".{out.name}.old-{os.getpid()}")
            out.rename(old)
            tmp.rename(out)
            shutil.rmtree(old, ignore_errors=True)
        else:
            tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def cmd_run(args) -> int:
    sc = resolve_scenario(args.scenario)
    cfg = resolve_config(args.config, "table2")
    mode = REAL if args.real_clock or args.distributed else VIRTUAL
    cloud_addr = None
    if args.distributed:
        from svs.wire import broker_addr

        cloud_addr = broker_addr(args.broker)
    if args.cameras not in CAMERA_PRESETS:
        log.info("camera count %d is not one of the presets %s", args.cameras, CAMERA_PRESETS)
    t0 = time.perf_counter()
    result = run_experiment(sc, cfg, args.cameras, args.duration, args.seed, mode, cloud_addr)
    write_run_dir(Path(args.out), result, cfg, args.force)
    print(render_report(result.report, "table"), end="")
    print(f"wrote {args.out} ({len(result.records)} records, {time.perf_counter() - t0:.1f} s)")
    return EXIT_OK


def cmd_report(args) -> int:
    rf = load_records(Path(args.run_dir) / RECORDS)
    sys.stdout.write(render_report(rf.report(), args.format))
    return EXIT_OK


# ---------------------------------------------------------------------------
# PCP benchmark

def pcp_csv(camera_count: int, kind: str, latencies: list[float]) -> str:
    label = CSV_KIND_LABEL[PCP_KIND_FOR[kind]]
    rows = ["camera_count,anomaly_kind,sample_index,latency_seconds"]
    rows += [f"{camera_count},{label},{i},{v!r}" for i, v in enumerate(latencies)]
    return "\n".join(rows) + "\n"


def cmd_bench_pcp(args) -> int:
    if args.samples < 1:
        raise UsageError("--samples must be at least 1")
    kind = KIND_ARG[args.kind]
    sc = resolve_scenario(args.scenario)
    cfg = resolve_config(args.config, "pcp")
    reporting = {c.camera_id for c in sc.cameras if c.reporting}
    wanted = sorted((i for i in sc.injections if i.kind == kind and i.camera_id in reporting), key=lambda i: i.frame_index)
    if len(wanted) < args.samples:
        raise ConfigError(f"scenario has {len(wanted)} {args.kind} injections on reporting cameras, {args.samples} requested")
    keep = {i.injection_id for i in wanted[: args.samples]}
    last = max(i.frame_index for i in wanted[: args.samples])
    # run just past the last wanted injection, leaving room for the notification to arrive
    tail = int((cfg.telemetry.match_horizon + 30.0) * sc.frame_rate)
    stop = min(sc.duration_frames, -(-(last + tail) // BATCH_SIZE) * BATCH_SIZE)
    sc = replace(sc, injections=tuple(i for i in sc.injections if i.injection_id in keep))
    result = run_experiment(sc, cfg, args.cameras, duration_frames=stop, seed=args.seed)
    samples = sorted(result.pcp.by_kind(kind), key=lambda s: s.ground_truth_ts)
    lat = [s.latency for s in samples]
    missed = [m for m in result.pcp.missed if m in keep]
    st = describe(lat, cfg.telemetry.population_stddev)
    print(f"PCP latency (s), {args.kind}, {args.cameras} camera(s)")
    print("n   mean    min     max     stddev  missed")
    if st is None:
        print(f"0   -       -       -       -       {len(missed)}")
    else:
        print(f"{st.n:<3} {st.mean:<7.2f} {st.min:<7.2f} {st.max:<7.2f} {st.stddev:<7.2f} {len(missed)}")
    text = pcp_csv(args.cameras, kind, lat)
    if args.csv:
        Path(args.csv).write_text(text, encoding="utf-8")
    else:
        print()
        print(text, end="")
    if args.strict and (missed or len(lat) < args.samples):
        print(f"strict: {len(missed)} missed injection(s)", file=sys.stderr)
        return EXIT_STRICT
    return EXIT_OK


# ---------------------------------------------------------------------------
# cloud service and subscriber client

def cmd_serve(args) -> int:
    from svs.clock import Clock
    from svs.cloudnode import CloudNode
    from svs.wire import CloudServer, broker_addr

    cfg = resolve_config(args.config, "pcp").cloud
    host, port = broker_addr(args.listen)

    async def main() -> None:
        clock = Clock(REAL, asyncio.get_running_loop())
        server = await CloudServer(CloudNode(cfg, clock), host, port).start()
        print(f"listening on {server.address}", flush=True)
        try:
            if args.duration is not None:
                await asyncio.sleep(args.duration)
            else:
                await asyncio.Event().wait()
        finally:
            await server.close()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_subscribe(args) -> int:
    from svs.experiment import SubscriberLog
    from svs.wire import CloudClient, broker_addr

    topics = [TOPIC_ARG.get(t, t) for t in args.topics.split(",") if t]
    if not topics:
        raise UsageError("--topics needs at least one topic")
    host, port = broker_addr(args.broker)
    log_fh = open(args.log, "a", encoding="utf-8") if args.log else None
    subscriber = SubscriberLog()

    async def main() -> int:
        done = asyncio.Event()
        lost = asyncio.Event()
        client = None
        for attempt in range(args.retries + 1):
            try:
                client = await CloudClient(host, port).connect()
                break
            except OSError as exc:
                if attempt == args.retries:
                    print(f"broker {host}:{port} unreachable: {exc}", file=sys.stderr)
                    return EXIT_RUNTIME
                await asyncio.sleep(min(0.2 * 2 ** attempt, 5.0))

        async def sink(msg) -> None:
            d = subscriber.accept(msg, time.time())
            if d is None:
                return
            print(f"{d.receipt_ts:.6f} {d.topic} seq={d.seq} camera={d.camera_id} kind={d.kind} event={d.event_id}", flush=True)
            if log_fh is not None:
                log_fh.write(json.dumps(d.to_dict(), sort_keys=True) + "\n")
                log_fh.flush()
            if args.count and len(subscriber.deliveries) >= args.count:
                done.set()

        async def closed() -> None:
            lost.set()

        client.on_closed = closed
        await client.subscribe(topics, sink)
        waits = [asyncio.ensure_future(done.wait()), asyncio.ensure_future(lost.wait())]
        await asyncio.wait(waits, timeout=args.duration, return_when=asyncio.FIRST_COMPLETED)
        for w in waits:
            w.cancel()
        await client.close()
        print(f"# {len(subscriber.deliveries)} notifications, {subscriber.duplicates} duplicates suppressed", file=sys.stderr)
        if lost.is_set() and not done.is_set():
            return EXIT_RUNTIME
        return EXIT_OK

    try:
        return asyncio.run(main())
    except KeyboardInterrupt:
        return EXIT_OK
    finally:
        if log_fh is not None:
            log_fh.close()


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="svs", description="Edge-to-cloud video surveillance emulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run an experiment and write a run directory")
    p.add_argument("--scenario", default="campus-8cam", help="scenario file or bundled name")
    p.add_argument("--cameras", type=_cameras, default=1, help="cameras to activate (presets 1, 2, 4, 8)")
    p.add_argument("--config", help="config file or bundled name (default: table2)")
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--real-clock", action="store_true", help="run in wall-clock time")
    p.add_argument("--seed", type=int)
    p.add_argument("--duration", type=int, help="frames per camera (default: whole scenario)")
    p.add_argument("--distributed", action="store_true", help="use a cloud served by `svs serve` (implies --real-clock)")
    p.add_argument("--broker", help="HOST:PORT of the cloud service")
    p.add_argument("--force", action="store_true", help="replace an existing run directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="re-render a run directory")
    p.add_argument("run_dir")
    p.add_argument("--format", default="table", choices=("table", "csv", "json"))
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench-pcp", help="notification latency for one anomaly kind")
    p.add_argument("--cameras", type=_cameras, default=1)
    p.add_argument("--kind", required=True, choices=sorted(KIND_ARG))
    p.add_argument("--samples", type=int, default=30)
    p.add_argument("--scenario", default="campus-8cam")
    p.add_argument("--config", help="config file or bundled name (default: pcp)")
    p.add_argument("--seed", type=int)
    p.add_argument("--csv", help="write per-sample CSV here instead of stdout")
    p.add_argument("--strict", action="store_true", help="exit 4 if any injection is missed")
    p.set_defaults(func=cmd_bench_pcp)

    p = sub.add_parser("serve", help="host the cloud services")
    p.add_argument("--listen", help="HOST:PORT (default 127.0.0.1:7400)")
    p.add_argument("--config", help="config whose cloud section sets service delays (default: pcp)")
    p.add_argument("--duration", type=float, help="stop after this many seconds")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("subscribe", help="end-user notification client")
    p.add_argument("--topics", default="object-anomaly,behavioral-anomaly")
    p.add_argument("--broker", help="HOST:PORT; SVS_BROKER_ADDR overrides")
    p.add_argument("--log", help="append the delivery log (JSON lines) here")
    p.add_argument("--count", type=int, default=0, help="exit after this many unique notifications")
    p.add_argument("--duration", type=float, help="exit after this many seconds")
    p.add_argument("--retries", type=int, default=5)
    p.set_defaults(func=cmd_subscribe)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"svs: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"svs: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ScenarioError, RecordsError) as exc:
        print(f"svs: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the exit code is the contract
        print(f"svs: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
