"""Global node: persistence, cross-camera re-identification and anomaly routing.

Every local node ships its finished batches here. Ingest persists metadata
and acknowledges at once. Object anomalies are turned into events inside
the ingest call and skip the analyzer; behavioural anomalies come out of a
per-camera EWMA analyzer fed by window scores. A single analysis worker
processes accepted batches in arrival order, so under heavy load work queues
up at the global node as well as at the accelerators.
"""

from __future__ import annotations

import asyncio
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from svs.analytics import FEATURE_DIM
from svs.batch import EnrichedBatch, WindowScore
from svs.clock import Clock
from svs.scenario import BEHAVIORAL_ANOMALY, FRAME_H, FRAME_W, OBJECT_ANOMALY, SUSPICIOUS_CLASSES

log = logging.getLogger(__name__)

TOPIC_OBJECT = "object-anomaly"
TOPIC_BEHAVIORAL = "behavioral-anomaly"
TOPIC_FOR_KIND = {OBJECT_ANOMALY: TOPIC_OBJECT, BEHAVIORAL_ANOMALY: TOPIC_BEHAVIORAL}

COUNTS = "Counts"
WINDOW = "WindowScore"
CROP = "Crop"
EVENT = "Event"
RECORD_KINDS = (COUNTS, WINDOW, CROP, EVENT)

COUNTS_TABLE = "CountsTable"
ANALYTICS_TABLE = "AnalyticsTable"

HEATMAP_CELLS = 16


class AnalyzerOrderError(ValueError):
    """A window score arrived with an index not above the last one seen."""


@dataclass(frozen=True)
class GlobalConfig:
    theta_anom: float = 0.5
    ewma_alpha: float = 0.3
    k_consecutive: int = 2
    cooldown_windows: int = 3
    theta_reid: float = 0.7
    # only reporting cameras publish to the cloud
    pcp_mode: bool = True
    # serial analysis worker: time per accepted batch
    analysis_base: float = 0.0
    analysis_per_feature: float = 0.0
    # behavioral events are written to and read back from the global database before publication
    record_delay: float = 0.0
    # global tracks not refreshed for this long stop matching
    track_ttl: float = 600.0
    forward_retries: int = 8
    forward_backoff: float = 0.05
    export_to_cloud: bool = True
    suspicious_classes: frozenset[str] = SUSPICIOUS_CLASSES

    def __post_init__(self) -> None:
        if not 0 < self.ewma_alpha <= 1:
            raise ValueError("ewma_alpha must lie in (0, 1]")
        if self.k_consecutive < 1:
            raise ValueError("k_consecutive must be >= 1")
        if self.cooldown_windows < 0:
            raise ValueError("cooldown_windows must be >= 0")
        if not 0 <= self.theta_anom <= 1:
            raise ValueError("theta_anom must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> GlobalConfig:
        kw: dict[str, Any] = {}
        for k in ("theta_anom", "ewma_alpha", "theta_reid"):
            if k in d:
                kw[k] = float(d[k])
        for k in ("k_consecutive", "cooldown_windows", "forward_retries"):
            if k in d:
                kw[k] = int(d[k])
        for k in ("pcp_mode", "export_to_cloud"):
            if k in d:
                kw[k] = bool(d[k])
        for k in ("analysis_base", "analysis_per_feature", "record_delay", "track_ttl", "forward_backoff"):
            if f"{k}_ms" in d:
                kw[k] = float(d[f"{k}_ms"]) / 1000.0
        if "track_ttl_s" in d:
            kw["track_ttl"] = float(d["track_ttl_s"])
        if "suspicious_classes" in d:
            kw["suspicious_classes"] = frozenset(d["suspicious_classes"])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "theta_anom": self.theta_anom,
            "ewma_alpha": self.ewma_alpha,
            "k_consecutive": self.k_consecutive,
            "cooldown_windows": self.cooldown_windows,
            "theta_reid": self.theta_reid,
            "pcp_mode": self.pcp_mode,
            "analysis_base_ms": round(self.analysis_base * 1000.0, 9),
            "analysis_per_feature_ms": round(self.analysis_per_feature * 1000.0, 9),
            "record_delay_ms": round(self.record_delay * 1000.0, 9),
            "track_ttl_s": self.track_ttl,
            "forward_retries": self.forward_retries,
            "forward_backoff_ms": round(self.forward_backoff * 1000.0, 9),
            "export_to_cloud": self.export_to_cloud,
            "suspicious_classes": sorted(self.suspicious_classes),
        }


# ---------------------------------------------------------------------------
# records and events

@dataclass
class StoredRecord:
    camera_id: str
    timestamp: float
    kind: str
    payload: dict

    def to_dict(self) -> dict:
        return {"camera_id": self.camera_id, "timestamp": self.timestamp, "kind": self.kind, "payload": self.payload}


@dataclass
class AnomalyEvent:
    event_id: str
    kind: str
    camera_id: str
    trigger_ts: float
    detect_ts: float
    detail: dict
    forward_ts: float | None = None

    def __post_init__(self) -> None:
        if self.trigger_ts > self.detect_ts:
            raise ValueError(f"event {self.event_id}: trigger_ts after detect_ts")
        need = ("class", "bbox") if self.kind == OBJECT_ANOMALY else ("smoothed_score", "window_span")
        missing = [k for k in need if k not in self.detail]
        if missing:
            raise ValueError(f"event {self.event_id}: detail lacks {missing}")

    def to_dict(self) -> dict:
        return {
            "event_id": self.event_id,
            "kind": self.kind,
            "camera_id": self.camera_id,
            "trigger_ts": self.trigger_ts,
            "detect_ts": self.detect_ts,
            "forward_ts": self.forward_ts,
            "detail": self.detail,
        }


class RecordStore:
    """Append-only metadata store keyed by (camera_id, timestamp, kind)."""

    def __init__(self) -> None:
        self._records: dict[tuple[str, float, str], StoredRecord] = {}
        # records accepted, counting those merged into an existing key
        self.accepted = 0

    def put(self, record: StoredRecord) -> bool:
        key = (record.camera_id, record.timestamp, record.kind)
        cur = self._records.get(key)
        if cur is None:
            self._records[key] = record
            self.accepted += 1
            return True
        if record.kind == EVENT:
            # events sharing a trigger timestamp live in one record
            cur.payload.setdefault("items", []).extend(record.payload.get("items", []))
            self.accepted += 1
            return True
        return False

    def get(self, camera_id: str, timestamp: float, kind: str) -> StoredRecord | None:
        return self._records.get((camera_id, timestamp, kind))

    def records(self, kind: str | None = None) -> list[StoredRecord]:
        out = [r for r in self._records.values() if kind is None or r.kind == kind]
        out.sort(key=lambda r: (r.camera_id, r.timestamp, r.kind))
        return out

    def __len__(self) -> int:
        return len(self._records)

    def snapshot(self) -> list[dict]:
        return [r.to_dict() for r in self.records()]


# ---------------------------------------------------------------------------
# re-identification

@dataclass
class GlobalTrack:
    global_id: int
    centroid: np.ndarray
    member_locals: set[tuple[str, int]]
    last_seen_ts: float
    n: int = 1


class ReidRegistry:
    """Centroid matching of unit feature vectors against live global tracks."""

    def __init__(self, theta_reid: float = 0.7, track_ttl: float = float("inf")):
        self.theta_reid = theta_reid
        self.track_ttl = track_ttl
        self.tracks: list[GlobalTrack] = []
        self.bindings: dict[tuple[str, int], int] = {}
        self._by_id: dict[int, GlobalTrack] = {}
        self._sums: dict[int, np.ndarray] = {}
        self._next = 1
        self.last_similarity = 0.0

    def _live(self, now: float) -> list[GlobalTrack]:
        if self.track_ttl == float("inf"):
            return self.tracks
        return [t for t in self.tracks if now - t.last_seen_ts <= self.track_ttl]

    def match(self, feature: np.ndarray, camera_id: str, local_id: int, now: float = 0.0) -> int:
        feature = np.asarray(feature, dtype=float)
        key = (camera_id, local_id)
        gid = self.bindings.get(key)
        if gid is not None:
            trk = self._by_id[gid]
            self.last_similarity = float(trk.centroid @ feature)
            self._absorb(trk, feature, key, now)
            return gid
        live = self._live(now)
        if live:
            sims = np.stack([t.centroid for t in live]) @ feature
            best = int(np.argmax(sims))
            self.last_similarity = float(sims[best])
            if sims[best] >= self.theta_reid:
                trk = live[best]
                self.bindings[key] = trk.global_id
                self._absorb(trk, feature, key, now)
                return trk.global_id
        else:
            self.last_similarity = 0.0
        trk = GlobalTrack(self._next, feature / np.linalg.norm(feature), {key}, now)
        self._next += 1
        self.tracks.append(trk)
        self._by_id[trk.global_id] = trk
        self._sums[trk.global_id] = feature.copy()
        self.bindings[key] = trk.global_id
        if self.track_ttl != float("inf") and len(self.tracks) > 256:
            self.tracks = self._live(now)
        return trk.global_id

    def _absorb(self, trk: GlobalTrack, feature: np.ndarray, key, now: float) -> None:
        s = self._sums[trk.global_id]
        s += feature
        trk.n += 1
        trk.centroid = s / np.linalg.norm(s)
        trk.member_locals.add(key)
        trk.last_seen_ts = max(trk.last_seen_ts, now)

    def partition(self) -> dict[int, set[tuple[str, int]]]:
        out: dict[int, set[tuple[str, int]]] = {}
        for key, gid in self.bindings.items():
            out.setdefault(gid, set()).add(key)
        return out


def reid_match(registry: ReidRegistry, feature: np.ndarray, camera_id: str, local_id: int, now: float = 0.0) -> int:
    return registry.match(feature, camera_id, local_id, now)


# ---------------------------------------------------------------------------
# behavioural analyzer

@dataclass
class AnalyzerState:
    ewma: float = 0.0
    consecutive_over: int = 0
    cooldown_remaining: int = 0
    windows_seen: int = 0
    last_window: int = -1


@dataclass(frozen=True)
class AnalyzerParams:
    theta_anom: float = 0.5
    alpha: float = 0.3
    k: int = 2
    cooldown: int = 3


def analyze_step(state: AnalyzerState, window_index: int, scene_score: float, p: AnalyzerParams) -> bool:
    """Advance one camera's analyzer by one window; True when an event fires.

    With a zero threshold every window with any movement counts as anomalous
    on its own, so the consecutive-window requirement is skipped.
    """
    if window_index <= state.last_window:
        raise AnalyzerOrderError(f"window {window_index} arrived after window {state.last_window}")
    state.last_window = window_index
    s = min(1.0, max(0.0, scene_score))
    state.ewma = s if state.windows_seen == 0 else p.alpha * s + (1.0 - p.alpha) * state.ewma
    state.windows_seen += 1
    if p.theta_anom == 0:
        over = s > 0
        need = 1
    else:
        over = state.ewma >= p.theta_anom
        need = p.k
    state.consecutive_over = state.consecutive_over + 1 if over else 0
    if state.cooldown_remaining > 0:
        state.cooldown_remaining -= 1
        return False
    fire = state.consecutive_over >= need if p.theta_anom == 0 else state.consecutive_over == need
    if fire:
        state.cooldown_remaining = p.cooldown
    return fire


# ---------------------------------------------------------------------------
# the node

@dataclass
class IngestAck:
    camera_id: str
    batch_index: int
    persist_ts: float
    duplicate: bool = False
    events: list[AnomalyEvent] = field(default_factory=list)


class GlobalNode:
    """Ingest, persistence, re-ID, analyzer and event routing.

    ``cloud`` is any object with ``publish(topic, payload)`` and
    ``put_item(item)`` coroutines; it may be ``None`` for a standalone node.
    """

    def __init__(
        self,
        config: GlobalConfig = GlobalConfig(),
        clock: Clock | None = None,
        cloud: Any = None,
        reporting: Iterable[str] | None = None,
        recorder: Any = None,
    ):
        self.config = config
        self.clock = clock
        self.cloud = cloud
        self.reporting = None if reporting is None else frozenset(reporting)
        self.recorder = recorder
        self.store = RecordStore()
        self.reid = ReidRegistry(config.theta_reid, config.track_ttl)
        self.params = AnalyzerParams(config.theta_anom, config.ewma_alpha, config.k_consecutive, config.cooldown_windows)
        self.analyzers: dict[str, AnalyzerState] = {}
        self.events: list[AnomalyEvent] = []
        self.published: list[AnomalyEvent] = []
        self.persisted_only: list[AnomalyEvent] = []
        self._seen_batches: set[tuple[str, int]] = set()
        self._object_keys: set[tuple[str, str, int]] = set()
        self._event_seq = 0
        self.records_ingested = 0
        self.duplicates = 0
        self.delayed_deliveries = 0
        self.export_failures = 0
        self.bindings_log: list[tuple[str, int, int, int]] = []
        self._work: asyncio.Queue | None = None
        self._outbox: deque[AnomalyEvent] = deque()
        self._outbox_wakeup: asyncio.Event | None = None
        self._exports: asyncio.Queue | None = None
        self._analytics_attrs: dict[tuple[str, float], dict] = {}
        self._tasks: list[asyncio.Task] = []
        self._pending: set[asyncio.Task] = set()
        self._closing = False

    # -- time ---------------------------------------------------------------

    def now(self) -> float:
        return 0.0 if self.clock is None else self.clock.now()

    def is_reporting(self, camera_id: str) -> bool:
        return self.reporting is None or camera_id in self.reporting

    # -- synchronous core ---------------------------------------------------

    def accept(self, eb: EnrichedBatch) -> IngestAck:
        """Persist a batch's metadata and raise its object anomalies."""
        key = (eb.camera_id, eb.batch_index)
        now = self.now()
        if key in self._seen_batches:
            self.duplicates += 1
            return IngestAck(eb.camera_id, eb.batch_index, now, duplicate=True)
        self._seen_batches.add(key)
        self._persist_batch(eb)
        events = self._object_events(eb, now)
        ack = IngestAck(eb.camera_id, eb.batch_index, now, events=list(events))
        return ack

    def analyze_batch(self, eb: EnrichedBatch, now: float | None = None) -> list[AnomalyEvent]:
        """Re-identify the batch's features and run its window scores through the analyzer."""
        now = self.now() if now is None else now
        for det in eb.all_detections():
            if det.feature is None or det.local_track_id is None:
                continue
            ts = eb.frames[det.frame_index - eb.batch.first_frame].capture_ts
            gid = self.reid.match(det.feature, eb.camera_id, det.local_track_id, ts)
            self.bindings_log.append((eb.camera_id, det.local_track_id, eb.batch_index, gid))
        out = []
        for ws in eb.window_scores:
            ev = self.analyze(ws, eb, now)
            if ev is not None:
                out.append(ev)
        return out

    def ingest_now(self, eb: EnrichedBatch) -> IngestAck:
        """Accept and analyze in one step, without the worker (used standalone)."""
        ack = self.accept(eb)
        if not ack.duplicate:
            ack.events.extend(self.analyze_batch(eb, ack.persist_ts))
            for ev in ack.events:
                self.route(ev)
        return ack

    def analyze(self, ws: WindowScore, eb: EnrichedBatch | None = None, now: float | None = None) -> AnomalyEvent | None:
        state = self.analyzers.setdefault(ws.camera_id, AnalyzerState())
        fired = analyze_step(state, ws.window_index, ws.scene_score, self.params)
        if not fired:
            return None
        now = self.now() if now is None else now
        trigger = now
        if eb is not None:
            last = ws.window_span[1]
            trigger = eb.frames[last - eb.batch.first_frame].capture_ts
        ev = self._new_event(
            BEHAVIORAL_ANOMALY, ws.camera_id, trigger, max(now, trigger),
            {"smoothed_score": state.ewma, "window_span": list(ws.window_span), "window_index": ws.window_index},
        )
        return ev

    def _new_event(self, kind: str, camera_id: str, trigger_ts: float, detect_ts: float, detail: dict) -> AnomalyEvent:
        self._event_seq += 1
        tag = "obj" if kind == OBJECT_ANOMALY else "beh"
        ev = AnomalyEvent(f"{camera_id}:{tag}:{self._event_seq}", kind, camera_id, trigger_ts, detect_ts, detail)
        self.events.append(ev)
        self.store.put(StoredRecord(camera_id, trigger_ts, EVENT, {"items": [_event_payload(ev)]}))
        self.records_ingested += 1
        self._export_analytics(camera_id, trigger_ts, {"event_ids": ev.event_id, "event_kind": kind})
        return ev

    def _object_events(self, eb: EnrichedBatch, now: float) -> list[AnomalyEvent]:
        first: dict[str, tuple[int, Any]] = {}
        for dets in eb.detections:
            for det in dets:
                if det.cls in self.config.suspicious_classes and det.cls not in first:
                    first[det.cls] = (det.frame_index, det)
        out = []
        for cls in sorted(first):
            dedup = (eb.camera_id, cls, eb.batch_index)
            if dedup in self._object_keys:
                continue
            self._object_keys.add(dedup)
            f, det = first[cls]
            trigger = eb.frames[f - eb.batch.first_frame].capture_ts
            detect_ts = eb.stage_ts.get("detect", now)
            out.append(
                self._new_event(
                    OBJECT_ANOMALY, eb.camera_id, trigger, max(detect_ts, trigger),
                    {"class": cls, "bbox": [round(v, 3) for v in det.bbox], "frame_index": f, "batch_index": eb.batch_index},
                )
            )
        return out

    def _persist_batch(self, eb: EnrichedBatch) -> None:
        cam = eb.camera_id
        counts: dict[str, int] = {}
        heat: dict[str, int] = {}
        for det in eb.all_detections():
            counts[det.cls] = counts.get(det.cls, 0) + 1
            if det.cls == "person":
                cell = _heat_cell(det.bbox)
                heat[cell] = heat.get(cell, 0) + 1
        persons_now = sum(1 for d in eb.detections[-1] if d.cls == "person")
        ts = eb.batch.capture_ts_last
        payload = {
            "batch_index": eb.batch_index,
            "counts": dict(sorted(counts.items())),
            "persons_last_frame": persons_now,
            "heat": dict(sorted(heat.items())),
        }
        self.store.put(StoredRecord(cam, ts, COUNTS, payload))
        self.records_ingested += 1
        attrs: dict[str, Any] = {"batch_index": eb.batch_index, "person_count": persons_now}
        for cls, n in counts.items():
            attrs[f"count_{cls}"] = n
        for cell, n in heat.items():
            attrs[f"heat_{cell}"] = n
        self._export(COUNTS_TABLE, cam, ts, attrs)

        first = eb.batch.first_frame
        for ws in eb.window_scores:
            wts = eb.frames[ws.window_span[1] - first].capture_ts
            self.store.put(StoredRecord(cam, wts, WINDOW, {
                "window_index": ws.window_index,
                "window_span": list(ws.window_span),
                "scene_score": ws.scene_score,
                "person_scores": {str(k): v for k, v in sorted(ws.person_scores.items())},
            }))
            self.records_ingested += 1
            self._export_analytics(cam, wts, {"scene_score": ws.scene_score, "window_index": ws.window_index})

        if eb.crops:
            items = []
            for lid, f in sorted(eb.crops.items()):
                det = next((d for d in eb.detections[f - first] if d.local_track_id == lid and d.cls == "person"), None)
                if det is None:
                    continue
                items.append({"local_id": lid, "frame_index": f, "bbox": [round(v, 3) for v in det.bbox]})
            self.store.put(StoredRecord(cam, ts, CROP, {"batch_index": eb.batch_index, "items": items}))
            self.records_ingested += 1

    # -- cloud export and forwarding -----------------------------------------

    def _export(self, table: str, camera_id: str, ts: float, attrs: dict) -> None:
        if self.cloud is None or not self.config.export_to_cloud or self._exports is None:
            return
        self._exports.put_nowait({"table": table, "key": [camera_id, ts], "attributes": dict(attrs)})

    def _export_analytics(self, camera_id: str, ts: float, attrs: dict) -> None:
        merged = self._analytics_attrs.setdefault((camera_id, ts), {})
        for k, v in attrs.items():
            if k == "event_ids" and "event_ids" in merged:
                merged[k] = f"{merged[k]},{v}"
            else:
                merged[k] = v
        if len(self._analytics_attrs) > 4096:
            # keys are written once or twice in quick succession; old ones are settled
            for k in list(self._analytics_attrs)[:2048]:
                del self._analytics_attrs[k]
        self._export(ANALYTICS_TABLE, camera_id, ts, merged)

    def route(self, event: AnomalyEvent) -> bool:
        """Queue an event for publication if its camera reports; False when only persisted."""
        if self.config.pcp_mode and not self.is_reporting(event.camera_id):
            self.persisted_only.append(event)
            return False
        self._outbox.append(event)
        if self._outbox_wakeup is not None:
            self._outbox_wakeup.set()
        return True

    async def forward(self, event: AnomalyEvent) -> bool:
        """Publish one event to its topic, retrying with bounded backoff."""
        if self.cloud is None:
            raise ConnectionError("no cloud node attached")
        attempt = 0
        while True:
            try:
                event.forward_ts = self.now()
                await self.cloud.publish(TOPIC_FOR_KIND[event.kind], _message_fields(event))
                self.published.append(event)
                return True
            except (ConnectionError, OSError, asyncio.TimeoutError):
                attempt += 1
                if attempt == 1:
                    self.delayed_deliveries += 1
                if attempt > self.config.forward_retries:
                    return False
                await self.clock.sleep(min(self.config.forward_backoff * 2 ** (attempt - 1), 1.0))

    # -- async service ------------------------------------------------------

    def start(self) -> GlobalNode:
        if self.clock is None:
            raise RuntimeError("the async service needs a clock")
        self._work = asyncio.Queue()
        self._outbox_wakeup = asyncio.Event()
        self._exports = asyncio.Queue()
        self._tasks = [
            asyncio.ensure_future(self._analysis_worker()),
            asyncio.ensure_future(self._outbox_worker()),
        ]
        if self.cloud is not None and self.config.export_to_cloud:
            self._tasks.append(asyncio.ensure_future(self._export_worker()))
        return self

    async def ingest(self, eb: EnrichedBatch) -> IngestAck:
        """Acknowledge once persisted; analysis and publication continue in the background."""
        ack = self.accept(eb)
        if not ack.duplicate:
            for ev in ack.events:
                self.route(ev)
            self._work.put_nowait(eb)
        return ack

    async def _analysis_worker(self) -> None:
        cfg = self.config
        while True:
            eb = await self._work.get()
            if eb is None:
                return
            n_feat = sum(1 for d in eb.all_detections() if d.feature is not None)
            service = cfg.analysis_base + cfg.analysis_per_feature * n_feat
            if service > 0:
                await self.clock.sleep(service)
            for ev in self.analyze_batch(eb):
                if cfg.record_delay > 0:
                    self._pending.add(asyncio.ensure_future(self._route_after(ev, cfg.record_delay)))
                else:
                    self.route(ev)

    async def _route_after(self, ev: AnomalyEvent, delay: float) -> None:
        await self.clock.sleep(delay)
        self.route(ev)

    async def _outbox_worker(self) -> None:
        while True:
            while not self._outbox:
                if self._closing:
                    return
                self._outbox_wakeup.clear()
                await self._outbox_wakeup.wait()
            ev = self._outbox[0]
            if await self.forward(ev):
                self._outbox.popleft()
            else:
                # the event stays queued; try again after a pause
                await self.clock.sleep(self.config.forward_backoff * 2 ** self.config.forward_retries)

    async def _export_worker(self) -> None:
        while True:
            item = await self._exports.get()
            if item is None:
                return
            t0 = self.now()
            try:
                await self.cloud.put_item(item)
            except (ConnectionError, OSError, asyncio.TimeoutError):
                self.export_failures += 1
                continue
            if self.recorder is not None:
                self.recorder.record("CloudPut", item["key"][0], f"{item['table']}:{item['key'][1]:.6f}", t0, self.now())

    async def drain(self) -> None:
        """Finish all queued analysis, publication and export, then stop the workers."""
        if self._work is None:
            return
        self._work.put_nowait(None)
        await self._tasks[0]
        while self._pending:
            await asyncio.gather(*self._pending)
            self._pending = {t for t in self._pending if not t.done()}
        self._closing = True
        self._outbox_wakeup.set()
        await self._tasks[1]
        if len(self._tasks) > 2:
            self._exports.put_nowait(None)
            await self._tasks[2]

    async def stop(self) -> None:
        tasks = [*self._tasks, *self._pending]
        for t in tasks:
            t.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)


def _heat_cell(bbox) -> str:
    cx = bbox[0] + bbox[2] / 2
    cy = bbox[1] + bbox[3] / 2
    col = min(HEATMAP_CELLS - 1, max(0, int(cx / FRAME_W * HEATMAP_CELLS)))
    row = min(HEATMAP_CELLS - 1, max(0, int(cy / FRAME_H * HEATMAP_CELLS)))
    return f"{row}_{col}"


def _event_payload(ev: AnomalyEvent) -> dict:
    return {"event_id": ev.event_id, "kind": ev.kind, "trigger_ts": ev.trigger_ts, "detect_ts": ev.detect_ts, "detail": ev.detail}


def _message_fields(ev: AnomalyEvent) -> dict:
    return {
        "event_id": ev.event_id,
        "camera_id": ev.camera_id,
        "kind": ev.kind,
        "trigger_ts": ev.trigger_ts,
        "detail": ev.detail,
    }


def assert_metadata_only(payload: Any, path: str = "payload") -> None:
    """Raise if a stored payload carries frame content (descriptors, keypoints, features)."""
    forbidden = {"entities", "visible_objects", "keypoints", "feature", "frames", "pixels"}
    if isinstance(payload, dict):
        for k, v in payload.items():
            if k in forbidden:
                raise AssertionError(f"{path}.{k} holds frame content")
            assert_metadata_only(v, f"{path}.{k}")
    elif isinstance(payload, (list, tuple)):
        for i, v in enumerate(payload):
            assert_metadata_only(v, f"{path}[{i}]")
    elif isinstance(payload, np.ndarray):
        raise AssertionError(f"{path} holds an array")
    elif not (payload is None or isinstance(payload, (str, int, float, bool))):
        raise AssertionError(f"{path} holds a {type(payload).__name__}")


__all__ = [
    "AnalyzerOrderError",
    "AnalyzerParams",
    "AnalyzerState",
    "AnomalyEvent",
    "GlobalConfig",
    "GlobalNode",
    "GlobalTrack",
    "IngestAck",
    "RecordStore",
    "ReidRegistry",
    "StoredRecord",
    "analyze_step",
    "assert_metadata_only",
    "reid_match",
    "FEATURE_DIM",
    "TOPIC_OBJECT",
    "TOPIC_BEHAVIORAL",
]
