"""Per-camera local-node runtime.

A camera's frames are grouped into 30-frame batches that flow through six
stages connected by bounded FIFO queues. Stages that run on an accelerator
hold tokens from a pool shared by every camera, which is where multi-camera
contention comes from. All waiting goes through :class:`svs.clock.Clock`, so
the same code runs on the virtual or the real clock.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, AsyncIterator, Awaitable, Callable, Iterable, Protocol

from svs import analytics
from svs.analytics import AnalyticsConfig, TrackerState, WindowScorer
from svs.batch import Batch, Detection, EnrichedBatch, WindowScore
from svs.clock import REAL, VIRTUAL, Clock
from svs.scenario import BATCH_SIZE, FrameDescriptor, Scenario, capture_time, generate_frames, stable_hash

__all__ = [
    "Batch",
    "Detection",
    "EnrichedBatch",
    "WindowScore",
    "StageConfig",
    "PipelineConfig",
    "PipelineError",
    "TokenPool",
    "InstrumentedQueue",
    "form_batches",
    "aform_batches",
    "run_stage",
    "service_time",
    "LocalNode",
    "run_local_node",
    "STAGE_ORDER",
]

log = logging.getLogger(__name__)

STAGE_ORDER = ("detect", "track", "pose", "anomaly_score", "crop_select", "extract_features")
LATENCY_REFERENCES = ("capture_ts_last", "capture_ts_first")


class PipelineError(RuntimeError):
    """Protocol violation inside a camera pipeline (aborts that camera)."""


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class StageConfig:
    name: str
    service_base: float = 0.0
    service_per_detection: float = 0.0
    jitter_fraction: float = 0.0
    token_cost: int = 0

    def __post_init__(self) -> None:
        if self.service_base < 0 or self.service_per_detection < 0:
            raise ValueError(f"stage {self.name!r}: service durations must be >= 0")
        if not 0 <= self.jitter_fraction < 1:
            raise ValueError(f"stage {self.name!r}: jitter_fraction must lie in [0, 1)")
        if self.token_cost < 0:
            raise ValueError(f"stage {self.name!r}: token_cost must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> StageConfig:
        known = {"name", "service_base_ms", "service_per_detection_ms", "jitter_fraction", "token_cost"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"stage config: unknown keys {sorted(extra)}")
        return cls(
            name=d["name"],
            service_base=float(d.get("service_base_ms", 0.0)) / 1000.0,
            service_per_detection=float(d.get("service_per_detection_ms", 0.0)) / 1000.0,
            jitter_fraction=float(d.get("jitter_fraction", 0.0)),
            token_cost=int(d.get("token_cost", 0)),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "service_base_ms": round(self.service_base * 1000.0, 9),
            "service_per_detection_ms": round(self.service_per_detection * 1000.0, 9),
            "jitter_fraction": self.jitter_fraction,
            "token_cost": self.token_cost,
        }


def default_stages() -> tuple[StageConfig, ...]:
    return tuple(StageConfig(name) for name in STAGE_ORDER)


@dataclass(frozen=True)
class PipelineConfig:
    queue_capacity: int = 4
    stages: tuple[StageConfig, ...] = field(default_factory=default_stages)
    accelerator_tokens: int = 4
    clock_mode: str = VIRTUAL
    # fixed delay between a batch's last capture and its arrival at the first stage
    source_latency: float = 0.0
    # one-way transport delay from the last stage to the global node
    uplink_delay: float = 0.0
    latency_reference: str = "capture_ts_last"
    analytics: AnalyticsConfig = field(default_factory=AnalyticsConfig)
    ingest_retries: int = 5
    ingest_backoff: float = 0.1

    def __post_init__(self) -> None:
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")
        if self.accelerator_tokens < 1:
            raise ValueError("accelerator_tokens must be >= 1")
        if self.clock_mode not in (VIRTUAL, REAL):
            raise ValueError(f"clock_mode must be {VIRTUAL!r} or {REAL!r}")
        if self.latency_reference not in LATENCY_REFERENCES:
            raise ValueError(f"latency_reference must be one of {LATENCY_REFERENCES}")
        names = tuple(s.name for s in self.stages)
        if names != STAGE_ORDER:
            raise ValueError(f"stages must be {list(STAGE_ORDER)} in this order, got {list(names)}")
        for s in self.stages:
            if s.token_cost > self.accelerator_tokens:
                raise ValueError(f"stage {s.name!r} needs {s.token_cost} tokens but the pool has {self.accelerator_tokens}")
        if self.source_latency < 0 or self.uplink_delay < 0:
            raise ValueError("source_latency and uplink_delay must be >= 0")

    def stage(self, name: str) -> StageConfig:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        kw: dict[str, Any] = {}
        if "queue_capacity" in d:
            kw["queue_capacity"] = int(d["queue_capacity"])
        if "accelerator_tokens" in d:
            kw["accelerator_tokens"] = int(d["accelerator_tokens"])
        if "clock_mode" in d:
            kw["clock_mode"] = str(d["clock_mode"]).lower()
        if "stages" in d:
            kw["stages"] = tuple(StageConfig.from_dict(s) for s in d["stages"])
        if "source_latency_ms" in d:
            kw["source_latency"] = float(d["source_latency_ms"]) / 1000.0
        if "uplink_ms" in d:
            kw["uplink_delay"] = float(d["uplink_ms"]) / 1000.0
        if "latency_reference" in d:
            kw["latency_reference"] = d["latency_reference"]
        if "analytics" in d:
            kw["analytics"] = AnalyticsConfig.from_dict(d["analytics"])
        if "ingest_retries" in d:
            kw["ingest_retries"] = int(d["ingest_retries"])
        if "ingest_backoff_ms" in d:
            kw["ingest_backoff"] = float(d["ingest_backoff_ms"]) / 1000.0
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "queue_capacity": self.queue_capacity,
            "accelerator_tokens": self.accelerator_tokens,
            "clock_mode": self.clock_mode,
            "source_latency_ms": round(self.source_latency * 1000.0, 9),
            "uplink_ms": round(self.uplink_delay * 1000.0, 9),
            "latency_reference": self.latency_reference,
            "ingest_retries": self.ingest_retries,
            "ingest_backoff_ms": round(self.ingest_backoff * 1000.0, 9),
            "stages": [s.to_dict() for s in self.stages],
            "analytics": self.analytics.to_dict(),
        }

    def with_clock(self, mode: str) -> PipelineConfig:
        return replace(self, clock_mode=mode)


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return PipelineConfig.from_dict(doc.get("pipeline", doc))


# ---------------------------------------------------------------------------
# shared accelerator pool and bounded queues

class TokenPool:
    """Counting semaphore with strict FIFO grant order across all waiters.

    A waiter at the head of the line that needs more tokens than are free
    blocks everyone behind it, so a large request is never starved.
    """

    def __init__(self, total: int):
        if total < 1:
            raise ValueError("a token pool needs at least one token")
        self.total = total
        self.free = total
        self._waiters: deque[tuple[int, asyncio.Future]] = deque()
        self.max_in_use = 0
        self.grants = 0

    @property
    def in_use(self) -> int:
        return self.total - self.free

    @property
    def waiting(self) -> int:
        return len(self._waiters)

    async def acquire(self, cost: int = 1) -> None:
        if cost > self.total:
            raise ValueError(f"request of {cost} tokens exceeds pool of {self.total}")
        if cost == 0:
            return
        if not self._waiters and self.free >= cost:
            self._take(cost)
            return
        fut = asyncio.get_running_loop().create_future()
        self._waiters.append((cost, fut))
        try:
            await fut
        except asyncio.CancelledError:
            if fut.done() and not fut.cancelled():
                # granted just before cancellation: hand the tokens back
                self.release(cost)
            else:
                self._waiters = deque(w for w in self._waiters if w[1] is not fut)
                self._grant()
            raise

    def release(self, cost: int = 1) -> None:
        if cost == 0:
            return
        self.free += cost
        if self.free > self.total:
            raise RuntimeError("token pool released more tokens than it holds")
        self._grant()

    def _take(self, cost: int) -> None:
        self.free -= cost
        self.grants += 1
        self.max_in_use = max(self.max_in_use, self.in_use)

    def _grant(self) -> None:
        while self._waiters and self._waiters[0][0] <= self.free:
            cost, fut = self._waiters.popleft()
            if fut.done():
                continue
            self._take(cost)
            fut.set_result(None)


class InstrumentedQueue:
    """Bounded FIFO that remembers its high-water mark."""

    def __init__(self, capacity: int, name: str = ""):
        self.name = name
        self.capacity = capacity
        self._q: asyncio.Queue = asyncio.Queue(maxsize=capacity)
        self.high_water = 0
        self.puts = 0

    async def put(self, item: Any) -> None:
        await self._q.put(item)
        if item is None:
            # end-of-stream marker, not a batch
            return
        self.puts += 1
        self.high_water = max(self.high_water, self._q.qsize())

    async def get(self) -> Any:
        return await self._q.get()

    def qsize(self) -> int:
        return self._q.qsize()


# ---------------------------------------------------------------------------
# batching

def _check_order(prev: int | None, frame: FrameDescriptor, camera_id: str | None) -> None:
    expected = 0 if prev is None else prev + 1
    if frame.frame_index != expected:
        raise PipelineError(f"camera {frame.camera_id!r}: frame {frame.frame_index} arrived, expected {expected}")
    if camera_id is not None and frame.camera_id != camera_id:
        raise PipelineError(f"frame of camera {frame.camera_id!r} in stream of {camera_id!r}")


def form_batches(frames: Iterable[FrameDescriptor]) -> Iterable[Batch]:
    """Group an in-order frame stream into 30-frame batches; a trailing partial group is dropped."""
    buf: list[FrameDescriptor] = []
    prev: int | None = None
    camera_id: str | None = None
    for frame in frames:
        _check_order(prev, frame, camera_id)
        prev = frame.frame_index
        camera_id = frame.camera_id
        buf.append(frame)
        if len(buf) == BATCH_SIZE:
            yield Batch(frame.camera_id, frame.frame_index // BATCH_SIZE, buf)
            buf = []


async def aform_batches(frames: AsyncIterator[FrameDescriptor]) -> AsyncIterator[Batch]:
    buf: list[FrameDescriptor] = []
    prev: int | None = None
    camera_id: str | None = None
    async for frame in frames:
        _check_order(prev, frame, camera_id)
        prev = frame.frame_index
        camera_id = frame.camera_id
        buf.append(frame)
        if len(buf) == BATCH_SIZE:
            yield Batch(frame.camera_id, frame.frame_index // BATCH_SIZE, buf)
            buf = []


# ---------------------------------------------------------------------------
# stage execution

def _unit(*parts: Any) -> float:
    """Deterministic uniform draw in [0, 1) keyed by ``parts``."""
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(h, "big") / 2.0**64


def service_time(stage: StageConfig, person_detections: int, jitter_key: tuple = ()) -> float:
    base = stage.service_base + stage.service_per_detection * person_detections
    if stage.jitter_fraction == 0 or base == 0:
        return base
    u = _unit(stage.name, *jitter_key)
    return base * (1.0 + stage.jitter_fraction * (2.0 * u - 1.0))


async def run_stage(
    batch: EnrichedBatch,
    stage: StageConfig,
    transform: Callable[[EnrichedBatch], EnrichedBatch],
    tokens: TokenPool,
    clock: Clock,
    jitter_key: tuple = (),
) -> EnrichedBatch:
    """Serve one batch: hold tokens for the modelled service time, then stamp completion.

    The service time depends on the person detections present after the
    transform, so a detector's cost follows the crowd it actually found.
    """
    await tokens.acquire(stage.token_cost)
    try:
        out = transform(batch)
        if out is not batch:
            out.stage_ts = {**batch.stage_ts, **out.stage_ts}
        n = out.person_detections() if stage.service_per_detection else 0
        dt = service_time(stage, n, jitter_key)
        await clock.sleep(dt)
        t = clock.now()
        prev = max(out.stage_ts.values(), default=None)
        if prev is not None and t < prev:
            t = prev
        out.stage_ts[stage.name] = t
    finally:
        tokens.release(stage.token_cost)
    return out


# ---------------------------------------------------------------------------
# the local node

class Downstream(Protocol):
    async def ingest(self, enriched: EnrichedBatch) -> Any: ...


class TelemetrySink(Protocol):
    def record(self, kind: str, camera_id: str, ref: str, t_start: float, t_end: float, batch_index: int | None = None) -> bool: ...


@dataclass
class LocalNodeResult:
    camera_id: str
    batches_formed: int = 0
    batches_delivered: int = 0
    batches_undelivered: int = 0
    windows_evaluated: int = 0
    degraded: bool = False
    queue_high_water: dict[str, int] = field(default_factory=dict)
    delivered_order: list[int] = field(default_factory=list)


class LocalNode:
    """One camera's pipeline: source, six stages and the uplink to the global node."""

    def __init__(
        self,
        scenario: Scenario,
        camera_id: str,
        config: PipelineConfig,
        downstream: Downstream,
        clock: Clock,
        tokens: TokenPool | None = None,
        recorder: TelemetrySink | None = None,
        seed: int | None = None,
    ):
        scenario.camera(camera_id)
        self.scenario = scenario
        self.camera_id = camera_id
        self.config = config
        self.downstream = downstream
        self.clock = clock
        self.tokens = tokens if tokens is not None else TokenPool(config.accelerator_tokens)
        self.recorder = recorder
        self.seed = scenario.seed if seed is None else seed
        self.tracker = TrackerState(camera_id)
        self.scorer = WindowScorer(camera_id, config.analytics.v_ref)
        self.result = LocalNodeResult(camera_id)
        self._cam_key = stable_hash(camera_id)
        cap = config.queue_capacity
        # queue i feeds stage i; the last queue feeds the uplink
        self.queues = [InstrumentedQueue(cap, name) for name in (*STAGE_ORDER, "uplink")]
        self._transforms = self._build_transforms()

    def _build_transforms(self) -> dict[str, Callable[[EnrichedBatch], EnrichedBatch]]:
        acfg = self.config.analytics
        seed = self.seed

        def do_detect(eb: EnrichedBatch) -> EnrichedBatch:
            out = analytics.detect(eb.batch, acfg, seed)
            out.stage_ts = dict(eb.stage_ts)
            return out

        def do_track(eb):
            return analytics.track(eb, self.tracker, acfg.tau_iou, acfg.max_age)

        def do_pose(eb):
            return analytics.extract_pose(eb, acfg, seed)

        def do_score(eb):
            self.scorer.push(eb)
            return eb

        def do_crop(eb):
            analytics.select_crop(eb)
            return eb

        def do_features(eb):
            return analytics.extract_features(eb, None, acfg.sigma_feat, seed)

        return {
            "detect": do_detect,
            "track": do_track,
            "pose": do_pose,
            "anomaly_score": do_score,
            "crop_select": do_crop,
            "extract_features": do_features,
        }

    def reference_ts(self, batch: Batch) -> float:
        if self.config.latency_reference == "capture_ts_first":
            return batch.capture_ts_first
        return batch.capture_ts_last

    async def run(self) -> LocalNodeResult:
        tasks = [asyncio.ensure_future(self._source())]
        for i, stage in enumerate(self.config.stages):
            tasks.append(asyncio.ensure_future(self._stage_worker(i, stage)))
        tasks.append(asyncio.ensure_future(self._uplink()))
        try:
            await asyncio.gather(*tasks)
        except BaseException:
            for t in tasks:
                t.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)
            raise
        self.result.windows_evaluated = self.scorer.windows_evaluated
        self.result.queue_high_water = {q.name: q.high_water for q in self.queues}
        return self.result

    async def _source(self) -> None:
        sc = self.scenario
        n_batches = sc.duration_frames // BATCH_SIZE
        origin = self.clock.origin
        out = self.queues[0]
        for k in range(n_batches):
            last_capture = capture_time(sc, self.camera_id, BATCH_SIZE * k + BATCH_SIZE - 1, origin)
            # a batch exists once its last frame is captured; ingress adds a fixed delay
            await self.clock.sleep_until(last_capture + self.config.source_latency)
            frames = generate_frames(sc, self.camera_id, BATCH_SIZE * k, BATCH_SIZE * (k + 1), origin)
            batch = next(iter(form_batches_from(frames, k)))
            self.result.batches_formed += 1
            await out.put(EnrichedBatch(batch=batch, detections=[[] for _ in frames]))
        await out.put(None)

    async def _stage_worker(self, i: int, stage: StageConfig) -> None:
        q_in, q_out = self.queues[i], self.queues[i + 1]
        transform = self._transforms[stage.name]
        while True:
            eb = await q_in.get()
            if eb is None:
                await q_out.put(None)
                return
            eb = await run_stage(eb, stage, transform, self.tokens, self.clock, (self.seed, self._cam_key, eb.batch_index))
            self._after_stage(stage.name, eb)
            await q_out.put(eb)

    def _after_stage(self, name: str, eb: EnrichedBatch) -> None:
        rec = self.recorder
        if rec is None:
            return
        if name == "detect":
            rec.record("DetectorStage", self.camera_id, f"batch:{eb.batch_index}",
                       self.reference_ts(eb.batch), eb.stage_ts[name], eb.batch_index)
        elif name == "anomaly_score":
            first = eb.batch.first_frame
            for ws in eb.window_scores:
                last = ws.window_span[1]
                rec.record("ActionStage", self.camera_id, f"window:{ws.window_index}",
                           eb.frames[last - first].capture_ts, eb.stage_ts[name], eb.batch_index)

    async def _uplink(self) -> None:
        q_in = self.queues[-1]
        cfg = self.config
        while True:
            eb = await q_in.get()
            if eb is None:
                return
            if cfg.uplink_delay > 0:
                await self.clock.sleep(cfg.uplink_delay)
            delivered = await self._deliver(eb)
            if delivered:
                t = self.clock.now()
                self.result.batches_delivered += 1
                self.result.delivered_order.append(eb.batch_index)
                if self.recorder is not None:
                    self.recorder.record("WholeSystem", self.camera_id, f"batch:{eb.batch_index}",
                                         self.reference_ts(eb.batch), t, eb.batch_index)
            else:
                self.result.batches_undelivered += 1

    async def _deliver(self, eb: EnrichedBatch) -> bool:
        cfg = self.config
        attempt = 0
        # a degraded camera still tries every batch, so it recovers on its own
        while True:
            try:
                await self.downstream.ingest(eb)
                self.result.degraded = False
                return True
            except (ConnectionError, OSError, asyncio.TimeoutError) as exc:
                attempt += 1
                if attempt > cfg.ingest_retries:
                    if not self.result.degraded:
                        log.warning("camera %s degraded: global node unreachable (%s)", self.camera_id, exc)
                    self.result.degraded = True
                    return False
                await self.clock.sleep(min(cfg.ingest_backoff * 2 ** (attempt - 1), 2.0))


def form_batches_from(frames: list[FrameDescriptor], batch_index: int) -> Iterable[Batch]:
    if frames and frames[0].frame_index != batch_index * BATCH_SIZE:
        raise PipelineError(f"batch {batch_index} must start at frame {batch_index * BATCH_SIZE}")
    yield Batch(frames[0].camera_id, batch_index, frames)


async def run_local_node(
    scenario: Scenario,
    camera_id: str,
    pipeline_config: PipelineConfig,
    downstream: Downstream,
    clock: Clock | None = None,
    tokens: TokenPool | None = None,
    recorder: TelemetrySink | None = None,
) -> LocalNodeResult:
    clock = clock if clock is not None else Clock(pipeline_config.clock_mode, asyncio.get_running_loop())
    node = LocalNode(scenario, camera_id, pipeline_config, downstream, clock, tokens, recorder)
    return await node.run()
