"""Self-hosted cloud tier: notification broker, key-value store and statistics.

The broker fans each published message out to the current subscribers of
its topic with at-least-once, per-topic ordered delivery and no retention.
The store keeps items under a (camera_id, timestamp) key per table and
answers range queries. The statistics service derives the end-user views
from store contents. :class:`CloudNode` bundles the three behind one async
API with optional per-call service delays.
"""

from __future__ import annotations

import asyncio
import bisect
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Awaitable, Callable, Iterable

import numpy as np

from svs.clock import Clock
from svs.globalnode import ANALYTICS_TABLE, COUNTS_TABLE, HEATMAP_CELLS, TOPIC_BEHAVIORAL, TOPIC_OBJECT

log = logging.getLogger(__name__)

TABLES = (COUNTS_TABLE, ANALYTICS_TABLE)
METRICS = ("person_count_now", "occupancy_indicator", "heatmap", "totals", "averages", "anomaly_list")
# the event listing is the one query that walks events rather than counters
ACTION_METRICS = frozenset({"anomaly_list"})


class CloudError(Exception):
    """Invalid request to a cloud service."""


class QueryError(CloudError):
    pass


@dataclass(frozen=True)
class CloudConfig:
    get_delay: float = 0.0146
    put_delay: float = 0.0175
    publish_delay: float = 0.150
    stats_action_delay: float = 0.105
    stats_statistical_delay: float = 0.0144
    # broker-to-device push transport
    push_delay: float = 0.0
    redelivery_attempts: int = 5
    redelivery_backoff: float = 0.05
    duplicate_probability: float = 0.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> CloudConfig:
        kw: dict[str, Any] = {}
        for k in ("get_delay", "put_delay", "publish_delay", "stats_action_delay", "stats_statistical_delay",
                  "push_delay", "redelivery_backoff"):
            if f"{k}_ms" in d:
                kw[k] = float(d[f"{k}_ms"]) / 1000.0
        if "redelivery_attempts" in d:
            kw["redelivery_attempts"] = int(d["redelivery_attempts"])
        if "duplicate_probability" in d:
            kw["duplicate_probability"] = float(d["duplicate_probability"])
        if "seed" in d:
            kw["seed"] = int(d["seed"])
        return cls(**kw)

    def to_dict(self) -> dict:
        ms = lambda v: round(v * 1000.0, 9)  # noqa: E731
        return {
            "get_delay_ms": ms(self.get_delay),
            "put_delay_ms": ms(self.put_delay),
            "publish_delay_ms": ms(self.publish_delay),
            "stats_action_delay_ms": ms(self.stats_action_delay),
            "stats_statistical_delay_ms": ms(self.stats_statistical_delay),
            "push_delay_ms": ms(self.push_delay),
            "redelivery_attempts": self.redelivery_attempts,
            "redelivery_backoff_ms": ms(self.redelivery_backoff),
            "duplicate_probability": self.duplicate_probability,
            "seed": self.seed,
        }

    @classmethod
    def instant(cls) -> CloudConfig:
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# broker

@dataclass
class NotificationMessage:
    topic: str
    seq: int
    camera_id: str
    kind: str
    trigger_ts: float
    publish_ts: float
    detail: dict
    event_id: str = ""

    def to_dict(self) -> dict:
        return {
            "topic": self.topic,
            "seq": self.seq,
            "camera_id": self.camera_id,
            "kind": self.kind,
            "trigger_ts": self.trigger_ts,
            "publish_ts": self.publish_ts,
            "detail": self.detail,
            "event_id": self.event_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> NotificationMessage:
        return cls(
            topic=d["topic"], seq=int(d["seq"]), camera_id=d["camera_id"], kind=d["kind"],
            trigger_ts=float(d["trigger_ts"]), publish_ts=float(d["publish_ts"]),
            detail=d.get("detail", {}), event_id=d.get("event_id", ""),
        )


Sink = Callable[[NotificationMessage], Awaitable[None]]


class Subscription:
    """One subscriber's view of the broker: a serialized FIFO delivery lane."""

    _ids = itertools.count(1)

    def __init__(self, broker: Broker, topics: Iterable[str], sink: Sink):
        self.id = next(self._ids)
        self.broker = broker
        self.topics: set[str] = set(topics)
        self.sink = sink
        self.delivered = 0
        self.duplicates_sent = 0
        self.dropped = False
        self._queue: asyncio.Queue = asyncio.Queue()
        self._task: asyncio.Task | None = None

    def start(self) -> None:
        if self._task is None:
            self._task = asyncio.ensure_future(self._pump())

    def enqueue(self, due: float, msg: NotificationMessage, copies: int = 1) -> None:
        for _ in range(copies):
            self._queue.put_nowait((due, msg))

    async def _pump(self) -> None:
        clock = self.broker.clock
        cfg = self.broker.config
        while True:
            entry = await self._queue.get()
            if entry is None:
                return
            due, msg = entry
            if clock is not None:
                await clock.sleep_until(due)
            attempt = 0
            while True:
                try:
                    await self.sink(msg)
                    self.delivered += 1
                    break
                except Exception as exc:  # noqa: BLE001 - any sink failure counts as a dead subscriber
                    attempt += 1
                    if attempt > cfg.redelivery_attempts:
                        log.warning("dropping subscriber %d after %d failed deliveries: %s", self.id, attempt, exc)
                        self.dropped = True
                        self.broker._drop(self)
                        return
                    if clock is not None:
                        await clock.sleep(cfg.redelivery_backoff * 2 ** (attempt - 1))

    async def close(self, drain: bool = True) -> None:
        if self._task is None:
            return
        if drain:
            self._queue.put_nowait(None)
            await self._task
        else:
            self._task.cancel()
            await asyncio.gather(self._task, return_exceptions=True)
        self._task = None


class Broker:
    """Topic fan-out with per-topic sequence numbers and no retention."""

    def __init__(self, config: CloudConfig = CloudConfig(), clock: Clock | None = None):
        self.config = config
        self.clock = clock
        self._seq: dict[str, int] = {}
        self._subs: dict[str, list[Subscription]] = {}
        self._all: list[Subscription] = []
        self._rng = np.random.default_rng([config.seed, 0xB20C])
        self.published = 0

    def subscribe(self, topics: Iterable[str], sink: Sink) -> Subscription:
        topics = set(topics)
        if not topics:
            raise CloudError("subscribe needs at least one topic")
        sub = Subscription(self, topics, sink)
        for t in sorted(topics):
            self._subs.setdefault(t, []).append(sub)
        self._all.append(sub)
        sub.start()
        return sub

    def add_topics(self, sub: Subscription, topics: Iterable[str]) -> None:
        for t in sorted(set(topics) - sub.topics):
            sub.topics.add(t)
            self._subs.setdefault(t, []).append(sub)

    def unsubscribe(self, sub: Subscription) -> None:
        self._drop(sub)

    def _drop(self, sub: Subscription) -> None:
        for t in sub.topics:
            lst = self._subs.get(t, [])
            if sub in lst:
                lst.remove(sub)
        if sub in self._all:
            self._all.remove(sub)

    def subscribers(self, topic: str) -> int:
        return len(self._subs.get(topic, ()))

    def publish_now(self, topic: str, fields: dict, now: float = 0.0, delivery_delay: float = 0.0) -> NotificationMessage:
        seq = self._seq.get(topic, 0) + 1
        self._seq[topic] = seq
        msg = NotificationMessage(
            topic=topic,
            seq=seq,
            camera_id=fields["camera_id"],
            kind=fields["kind"],
            trigger_ts=float(fields["trigger_ts"]),
            publish_ts=max(now, float(fields["trigger_ts"])),
            detail=fields.get("detail", {}),
            event_id=fields.get("event_id", ""),
        )
        self.published += 1
        due = now + delivery_delay
        p_dup = self.config.duplicate_probability
        for sub in list(self._subs.get(topic, ())):
            copies = 1
            if p_dup > 0 and self._rng.random() < p_dup:
                copies = 2
                sub.duplicates_sent += 1
            sub.enqueue(due, msg, copies)
        return msg

    async def close(self) -> None:
        for sub in list(self._all):
            await sub.close(drain=True)


# ---------------------------------------------------------------------------
# key-value store

@dataclass
class KVItem:
    table: str
    key: tuple[str, float]
    attributes: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.table not in TABLES:
            raise CloudError(f"unknown table {self.table!r}")
        cam, ts = self.key
        self.key = (str(cam), float(ts))
        if self.key[1] < 0 or math.isnan(self.key[1]):
            raise CloudError("timestamps must be non-negative")
        for k, v in self.attributes.items():
            if not (v is None or isinstance(v, (str, int, float, bool))):
                raise CloudError(f"attribute {k!r} must be a scalar")

    def to_dict(self) -> dict:
        return {"table": self.table, "key": [self.key[0], self.key[1]], "attributes": dict(self.attributes)}

    @classmethod
    def from_dict(cls, d: dict) -> KVItem:
        key = d["key"]
        return cls(d["table"], (key[0], key[1]), dict(d.get("attributes", {})))


class KVStore:
    def __init__(self) -> None:
        self._items: dict[str, dict[tuple[str, float], KVItem]] = {t: {} for t in TABLES}
        # per (table, camera) sorted timestamps for range queries
        self._index: dict[tuple[str, str], list[float]] = {}

    def put_item(self, item: KVItem) -> None:
        table = self._items.get(item.table)
        if table is None:
            raise CloudError(f"unknown table {item.table!r}")
        if item.key not in table:
            idx = self._index.setdefault((item.table, item.key[0]), [])
            bisect.insort(idx, item.key[1])
        table[item.key] = KVItem(item.table, item.key, dict(item.attributes))

    def get_item(self, table: str, key: tuple[str, float]) -> KVItem | None:
        if table not in self._items:
            raise CloudError(f"unknown table {table!r}")
        item = self._items[table].get((str(key[0]), float(key[1])))
        return None if item is None else KVItem(item.table, item.key, dict(item.attributes))

    def query_range(self, table: str, camera_id: str, time_range: tuple[float, float]) -> list[KVItem]:
        t0, t1 = time_range
        if t0 > t1:
            raise QueryError(f"time range [{t0}, {t1}] is not well-ordered")
        if table not in self._items:
            raise CloudError(f"unknown table {table!r}")
        idx = self._index.get((table, camera_id), [])
        lo = bisect.bisect_left(idx, t0)
        hi = bisect.bisect_right(idx, t1)
        items = self._items[table]
        return [items[(camera_id, ts)] for ts in idx[lo:hi]]

    def cameras(self, table: str) -> list[str]:
        return sorted(cam for (t, cam) in self._index if t == table)

    def snapshot(self) -> list[KVItem]:
        out = []
        for table in TABLES:
            out.extend(self._items[table].values())
        return out

    def __len__(self) -> int:
        return sum(len(t) for t in self._items.values())


# ---------------------------------------------------------------------------
# statistics

@dataclass(frozen=True)
class StatsQuery:
    metric: str
    camera_id: str | None = None
    time_range: tuple[float, float] = (0.0, math.inf)

    def __post_init__(self) -> None:
        if self.metric not in METRICS:
            raise QueryError(f"unknown metric {self.metric!r}")
        if self.time_range[0] > self.time_range[1]:
            raise QueryError("time range is not well-ordered")

    def to_dict(self) -> dict:
        t1 = self.time_range[1]
        return {"metric": self.metric, "camera_id": self.camera_id,
                "time_range": [self.time_range[0], None if math.isinf(t1) else t1]}

    @classmethod
    def from_dict(cls, d: dict) -> StatsQuery:
        tr = d.get("time_range") or [0.0, None]
        return cls(d["metric"], d.get("camera_id"), (float(tr[0]), math.inf if tr[1] is None else float(tr[1])))


@dataclass
class StatsResult:
    metric: str
    payload: Any

    def to_dict(self) -> dict:
        return {"metric": self.metric, "payload": self.payload}


def occupancy_level(z: float) -> str:
    if z > 1:
        return "high"
    if z < -1:
        return "low"
    return "normal"


def occupancy_z(history: list[float], current: float) -> float:
    """z-score of the current count against a population mean and stddev."""
    if not history:
        return 0.0
    mean = sum(history) / len(history)
    var = sum((h - mean) ** 2 for h in history) / len(history)
    if var == 0:
        if current == mean:
            return 0.0
        return math.copysign(math.inf, current - mean)
    return (current - mean) / math.sqrt(var)


def compute_stats(store: KVStore, query: StatsQuery) -> StatsResult:
    """Pure function of the store contents."""
    cams = [query.camera_id] if query.camera_id is not None else store.cameras(COUNTS_TABLE)
    m = query.metric
    tr = query.time_range

    if m == "person_count_now":
        out = {}
        for cam in cams:
            items = store.query_range(COUNTS_TABLE, cam, tr)
            out[cam] = int(items[-1].attributes.get("person_count", 0)) if items else 0
        return StatsResult(m, out)

    if m == "occupancy_indicator":
        out = {}
        for cam in cams:
            items = store.query_range(COUNTS_TABLE, cam, tr)
            if not items:
                out[cam] = {"current": 0, "z": 0.0, "level": "normal"}
                continue
            values = [float(i.attributes.get("person_count", 0)) for i in items]
            z = occupancy_z(values[:-1], values[-1])
            out[cam] = {"current": values[-1], "z": z if math.isfinite(z) else str(z), "level": occupancy_level(z)}
        return StatsResult(m, out)

    if m == "heatmap":
        grid = [[0] * HEATMAP_CELLS for _ in range(HEATMAP_CELLS)]
        for cam in cams:
            for item in store.query_range(COUNTS_TABLE, cam, tr):
                for k, v in item.attributes.items():
                    if k.startswith("heat_"):
                        r, c = (int(x) for x in k[5:].split("_"))
                        grid[r][c] += int(v)
        return StatsResult(m, grid)

    if m in ("totals", "averages"):
        out = {}
        for cam in cams:
            items = store.query_range(COUNTS_TABLE, cam, tr)
            sums: dict[str, float] = {}
            for item in items:
                for k, v in item.attributes.items():
                    if k.startswith("count_"):
                        sums[k[6:]] = sums.get(k[6:], 0) + v
            if m == "averages":
                sums = {k: v / len(items) for k, v in sums.items()} if items else {}
            out[cam] = dict(sorted(sums.items()))
        return StatsResult(m, out)

    # anomaly_list
    cams = [query.camera_id] if query.camera_id is not None else store.cameras(ANALYTICS_TABLE)
    events = []
    for cam in cams:
        for item in store.query_range(ANALYTICS_TABLE, cam, tr):
            if "event_ids" in item.attributes:
                events.append({"camera_id": cam, "timestamp": item.key[1],
                               "event_ids": item.attributes["event_ids"],
                               "event_kind": item.attributes.get("event_kind")})
    events.sort(key=lambda e: (e["timestamp"], e["camera_id"]))
    return StatsResult(m, events)


# ---------------------------------------------------------------------------
# bundled service

class CloudNode:
    """Broker, store and statistics behind one async API.

    Each call waits its configured service delay on the clock before it
    takes effect, standing in for the round trip to a hosted service.
    """

    def __init__(self, config: CloudConfig = CloudConfig(), clock: Clock | None = None, recorder: Any = None):
        self.config = config
        self.clock = clock
        self.recorder = recorder
        self.broker = Broker(config, clock)
        self.store = KVStore()
        self.available = True
        self.rejected_while_down = 0

    def _check_up(self) -> None:
        if not self.available:
            self.rejected_while_down += 1
            raise ConnectionError("cloud node unavailable")

    async def _delay(self, seconds: float) -> None:
        if self.clock is not None and seconds > 0:
            await self.clock.sleep(seconds)

    def _now(self) -> float:
        return 0.0 if self.clock is None else self.clock.now()

    async def publish(self, topic: str, fields: dict) -> NotificationMessage:
        self._check_up()
        t0 = self._now()
        await self._delay(self.config.publish_delay)
        self._check_up()
        msg = self.broker.publish_now(topic, fields, self._now(), self.config.push_delay)
        if self.recorder is not None:
            self.recorder.record("CloudPublish", msg.camera_id, f"{topic}:{msg.seq}", t0, self._now())
        return msg

    def subscribe(self, topics: Iterable[str], sink: Sink) -> Subscription:
        return self.broker.subscribe(topics, sink)

    def unsubscribe(self, sub: Subscription) -> None:
        self.broker.unsubscribe(sub)

    async def put_item(self, item: KVItem | dict) -> None:
        self._check_up()
        if isinstance(item, dict):
            item = KVItem.from_dict(item)
        await self._delay(self.config.put_delay)
        self.store.put_item(item)

    async def get_item(self, table: str, key: tuple[str, float]) -> KVItem | None:
        self._check_up()
        await self._delay(self.config.get_delay)
        return self.store.get_item(table, key)

    async def query_range(self, table: str, camera_id: str, time_range: tuple[float, float]) -> list[KVItem]:
        self._check_up()
        await self._delay(self.config.get_delay)
        return self.store.query_range(table, camera_id, time_range)

    async def stats(self, query: StatsQuery) -> StatsResult:
        self._check_up()
        delay = self.config.stats_action_delay if query.metric in ACTION_METRICS else self.config.stats_statistical_delay
        await self._delay(delay)
        return compute_stats(self.store, query)

    async def close(self) -> None:
        await self.broker.close()


__all__ = [
    "Broker",
    "CloudConfig",
    "CloudError",
    "CloudNode",
    "KVItem",
    "KVStore",
    "NotificationMessage",
    "QueryError",
    "StatsQuery",
    "StatsResult",
    "Subscription",
    "compute_stats",
    "occupancy_level",
    "occupancy_z",
    "TOPIC_OBJECT",
    "TOPIC_BEHAVIORAL",
]
