"""End-to-end runs: N local nodes, the global node, the cloud tier and an end user.

Everything runs in one process on one event loop. On the virtual clock a
20-minute, 8-camera run finishes in seconds and is exactly reproducible.
"""

from __future__ import annotations

import asyncio
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from svs.cloudnode import CloudConfig, CloudNode, NotificationMessage, StatsQuery
from svs.clock import REAL, VIRTUAL, Clock, run as run_clock
from svs.globalnode import COUNTS_TABLE, TOPIC_BEHAVIORAL, TOPIC_OBJECT, GlobalConfig, GlobalNode
from svs.pipeline import LocalNode, LocalNodeResult, PipelineConfig, TokenPool
from svs.scenario import BATCH_SIZE, Scenario, capture_time, injection_schedule
from svs.telemetry import Delivery, LatencyRecord, PCPResult, Recorder, RunReport, compute_metrics, measure_pcp

CAMERA_PRESETS = (1, 2, 4, 8)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TelemetryConfig:
    # warm-up of a run of reference_batches; shorter runs drop the same share
    warmup_batches: int = 200
    reference_batches: int = 1200
    match_horizon: float = 10.0
    population_stddev: bool = True

    def warmup_for(self, total_batches: int) -> int:
        if total_batches >= self.reference_batches:
            return self.warmup_batches
        return self.warmup_batches * total_batches // self.reference_batches

    @classmethod
    def from_dict(cls, d: dict) -> TelemetryConfig:
        return cls(
            warmup_batches=int(d.get("warmup_batches", 200)),
            reference_batches=int(d.get("reference_batches", 1200)),
            match_horizon=float(d.get("match_horizon_s", 10.0)),
            population_stddev=d.get("stddev", "population") == "population",
        )

    def to_dict(self) -> dict:
        return {"warmup_batches": self.warmup_batches, "reference_batches": self.reference_batches,
                "match_horizon_s": self.match_horizon,
                "stddev": "population" if self.population_stddev else "sample"}


@dataclass(frozen=True)
class AppConfig:
    # the end-user app polls the store at this period; 0 disables it
    query_interval: float = 10.0

    @classmethod
    def from_dict(cls, d: dict) -> AppConfig:
        return cls(query_interval=float(d.get("query_interval_s", 10.0)))

    def to_dict(self) -> dict:
        return {"query_interval_s": self.query_interval}


@dataclass(frozen=True)
class ExperimentConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    global_: GlobalConfig = field(default_factory=GlobalConfig)
    cloud: CloudConfig = field(default_factory=CloudConfig)
    telemetry: TelemetryConfig = field(default_factory=TelemetryConfig)
    app: AppConfig = field(default_factory=AppConfig)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {"pipeline", "global", "cloud", "telemetry", "app", "description"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config sections {sorted(extra)}")
        try:
            return cls(
                pipeline=PipelineConfig.from_dict(d.get("pipeline", {})),
                global_=GlobalConfig.from_dict(d.get("global", {})),
                cloud=CloudConfig.from_dict(d.get("cloud", {})),
                telemetry=TelemetryConfig.from_dict(d.get("telemetry", {})),
                app=AppConfig.from_dict(d.get("app", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "pipeline": self.pipeline.to_dict(),
            "global": self.global_.to_dict(),
            "cloud": self.cloud.to_dict(),
            "telemetry": self.telemetry.to_dict(),
            "app": self.app.to_dict(),
        }

    def with_clock(self, mode: str) -> ExperimentConfig:
        return replace(self, pipeline=self.pipeline.with_clock(mode))


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(doc)


def bundled_config_path(name: str = "table2") -> Path:
    return Path(__file__).parent / "data" / f"config-{name}.json"


def load_bundled_config(name: str = "table2") -> ExperimentConfig:
    return load_config(bundled_config_path(name))


# ---------------------------------------------------------------------------
# the end user

class SubscriberLog:
    """End-user notification client: receipt timestamps with event_id dedup."""

    def __init__(self, clock: Clock | None = None):
        self.clock = clock
        self.deliveries: list[Delivery] = []
        self.duplicates = 0
        self.received = 0
        self._seen: set[str] = set()
        self._last_seq: dict[str, int] = {}
        self.order_violations = 0

    def accept(self, msg: NotificationMessage, receipt_ts: float) -> Delivery | None:
        self.received += 1
        last = self._last_seq.get(msg.topic, 0)
        if msg.seq < last:
            self.order_violations += 1
        self._last_seq[msg.topic] = max(last, msg.seq)
        key = msg.event_id or f"{msg.topic}:{msg.seq}"
        if key in self._seen:
            self.duplicates += 1
            return None
        self._seen.add(key)
        d = Delivery(key, msg.topic, msg.seq, msg.kind, msg.camera_id, msg.trigger_ts, receipt_ts)
        self.deliveries.append(d)
        return d

    async def sink(self, msg: NotificationMessage) -> None:
        self.accept(msg, 0.0 if self.clock is None else self.clock.now())


async def _app_client(cloud: CloudNode, clock: Clock, cfg: AppConfig, scenario: Scenario, recorder: Recorder) -> None:
    """Poll the store the way the end-user app does: one lookup and one stats query per period."""
    if cfg.query_interval <= 0:
        return
    cams = list(scenario.camera_ids)
    period = BATCH_SIZE / scenario.frame_rate
    k = 0
    while True:
        await clock.sleep(cfg.query_interval)
        k += 1
        cam = cams[k % len(cams)]
        batch = max(0, int((clock.now() - clock.origin) / period) - 4)
        key = (cam, capture_time(scenario, cam, BATCH_SIZE * batch + BATCH_SIZE - 1, clock.origin))
        t0 = clock.now()
        await cloud.get_item(COUNTS_TABLE, key)
        recorder.record("CloudGet", cam, f"get:{k}", t0, clock.now())
        metric = "anomaly_list" if k % 2 else "person_count_now"
        t0 = clock.now()
        await cloud.stats(StatsQuery(metric, cam, (0.0, math.inf)))
        recorder.record("CloudStats", cam, f"{metric}:{k}", t0, clock.now())


# ---------------------------------------------------------------------------
# orchestration

@dataclass
class RunResult:
    report: RunReport
    records: list[LatencyRecord]
    deliveries: list[Delivery]
    pcp: PCPResult
    node_results: list[LocalNodeResult]
    meta: dict[str, Any]
    rejected: int = 0

    def record_params(self) -> dict[str, Any]:
        """Everything besides the records needed to rebuild the report."""
        r = self.report
        return {
            "warmup_batches": r.warmup_batches,
            "total_batches": r.total_batches,
            "camera_count": r.camera_count,
            "population": r.stddev_mode == "population",
            "rejected": self.rejected,
            "extra": r.extra,
        }


def select_cameras(scenario: Scenario, camera_count: int | None) -> Scenario:
    if camera_count is None:
        return scenario
    ids = scenario.camera_ids
    if not 1 <= camera_count <= len(ids):
        raise ConfigError(f"camera_count {camera_count} outside 1..{len(ids)} for this scenario")
    return scenario.with_cameras(ids[:camera_count])


async def run_async(scenario: Scenario, config: ExperimentConfig, clock: Clock, cloud: Any = None) -> RunResult:
    """Run every component on ``clock``; ``cloud`` may be a remote client instead of an in-process node."""
    recorder = Recorder()
    remote = cloud is not None
    if cloud is None:
        cloud = CloudNode(config.cloud, clock, recorder)
    reporting = [c.camera_id for c in scenario.cameras if c.reporting]
    gnode = GlobalNode(config.global_, clock, cloud, reporting, recorder).start()
    subscriber = SubscriberLog(clock)
    handle = cloud.subscribe({TOPIC_OBJECT, TOPIC_BEHAVIORAL}, subscriber.sink)
    if asyncio.iscoroutine(handle):
        await handle
    app = asyncio.ensure_future(_app_client(cloud, clock, config.app, scenario, recorder))
    tokens = TokenPool(config.pipeline.accelerator_tokens)
    nodes = [LocalNode(scenario, cam, config.pipeline, gnode, clock, tokens, recorder) for cam in scenario.camera_ids]
    try:
        results = await asyncio.gather(*(n.run() for n in nodes))
        await gnode.drain()
        if remote:
            # notifications already published are still on their way back
            await clock.sleep(config.cloud.push_delay + 1.0)
        else:
            await cloud.close()
    finally:
        app.cancel()
        await asyncio.gather(app, return_exceptions=True)
        await gnode.stop()

    schedule = injection_schedule(scenario, clock.origin)
    pcp = measure_pcp(schedule, subscriber.deliveries, config.telemetry.match_horizon)
    total_batches = scenario.duration_frames // BATCH_SIZE
    report = compute_metrics(
        recorder.records,
        warmup_batches=config.telemetry.warmup_for(total_batches),
        total_batches=total_batches,
        camera_count=len(scenario.camera_ids),
        population=config.telemetry.population_stddev,
        rejected=recorder.rejected,
        pcp=pcp,
    )
    meta = {
        "cameras": list(scenario.camera_ids),
        "reporting_cameras": reporting,
        "duration_frames": scenario.duration_frames,
        "total_batches": total_batches,
        "seed": scenario.seed,
        "clock_mode": clock.mode,
        "tokens_max_in_use": tokens.max_in_use,
        "queue_high_water": {r.camera_id: r.queue_high_water for r in results},
        "queue_capacity": config.pipeline.queue_capacity,
        "batches_formed": sum(r.batches_formed for r in results),
        "batches_delivered": sum(r.batches_delivered for r in results),
        "batches_undelivered": sum(r.batches_undelivered for r in results),
        "windows_evaluated": {r.camera_id: r.windows_evaluated for r in results},
        "events_total": len(gnode.events),
        "events_published": len(gnode.published),
        "events_persisted_only": len(gnode.persisted_only),
        "published_cameras": sorted({e.camera_id for e in gnode.published}),
        "global_tracks": len(gnode.reid.tracks),
        "records_stored": len(gnode.store),
        "records_ingested": gnode.records_ingested,
        "store_accepted": gnode.store.accepted,
        "notifications_received": subscriber.received,
        "notification_duplicates": subscriber.duplicates,
        "notification_order_violations": subscriber.order_violations,
        "recorder_overflow": recorder.overflow,
        "injections": len(schedule),
    }
    report.extra = {"run": meta}
    return RunResult(report, list(recorder.records), list(subscriber.deliveries), pcp, list(results), meta, recorder.rejected)


def run_experiment(
    scenario: Scenario,
    config: ExperimentConfig = ExperimentConfig(),
    camera_count: int | None = None,
    duration_frames: int | None = None,
    seed: int | None = None,
    clock_mode: str | None = None,
    cloud_addr: tuple[str, int] | None = None,
) -> RunResult:
    sc = select_cameras(scenario, camera_count)
    if duration_frames is not None:
        sc = sc.with_duration(duration_frames)
    if seed is not None:
        sc = replace(sc, seed=seed)
    mode = clock_mode or config.pipeline.clock_mode
    if mode not in (VIRTUAL, REAL):
        raise ConfigError(f"unknown clock mode {mode!r}")
    if cloud_addr is None:
        return run_clock(lambda clock: run_async(sc, config, clock), mode)
    if mode != REAL:
        raise ConfigError("a remote cloud needs the real clock")

    async def remote(clock: Clock) -> RunResult:
        from svs.wire import CloudClient

        client = await CloudClient(*cloud_addr).connect()
        try:
            return await run_async(sc, config, clock, client)
        finally:
            await client.close()

    return run_clock(remote, mode)
