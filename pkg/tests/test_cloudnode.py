from __future__ import annotations

import asyncio
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import run_virtual
from svs.cloudnode import (
    CloudConfig,
    CloudError,
    CloudNode,
    KVItem,
    KVStore,
    QueryError,
    StatsQuery,
    compute_stats,
    occupancy_z,
)
from svs.experiment import SubscriberLog
from svs.globalnode import COUNTS_TABLE, TOPIC_BEHAVIORAL, TOPIC_OBJECT

OBJ = "ObjectAnomaly"
BEH = "BehavioralAnomaly"


def _fields(i: int, kind: str = OBJ) -> dict:
    return {"event_id": f"e{i}", "camera_id": "c", "kind": kind, "trigger_ts": float(i), "detail": {}}


def _with_cloud(body, config=CloudConfig.instant()):
    async def main(clock):
        cloud = CloudNode(config, clock)
        out = await body(cloud, clock)
        await cloud.close()
        return out

    return run_virtual(main)


class Log:
    def __init__(self):
        self.msgs = []

    async def sink(self, msg):
        self.msgs.append(msg)


# ---------------------------------------------------------------------------
# broker

def test_publish_without_subscribers():
    async def body(cloud, clock):
        msg = await cloud.publish(TOPIC_OBJECT, _fields(1))
        return msg.seq, cloud.broker.subscribers(TOPIC_OBJECT)

    assert _with_cloud(body) == (1, 0)


def test_fan_out_to_two_subscribers():
    async def body(cloud, clock):
        a, b = Log(), Log()
        cloud.subscribe({TOPIC_BEHAVIORAL}, a.sink)
        cloud.subscribe({TOPIC_BEHAVIORAL}, b.sink)
        await cloud.publish(TOPIC_BEHAVIORAL, _fields(1, BEH))
        return a, b

    a, b = _with_cloud(body)
    assert len(a.msgs) == len(b.msgs) == 1


def test_hundred_messages_in_order():
    async def body(cloud, clock):
        logs = [Log() for _ in range(3)]
        for lg in logs:
            cloud.subscribe({TOPIC_OBJECT}, lg.sink)
        for i in range(100):
            await cloud.publish(TOPIC_OBJECT, _fields(i))
        return logs

    for lg in _with_cloud(body):
        assert [m.seq for m in lg.msgs] == list(range(1, 101))


def test_no_retention_and_routing():
    async def body(cloud, clock):
        late, both = Log(), Log()
        cloud.subscribe({TOPIC_OBJECT, TOPIC_BEHAVIORAL}, both.sink)
        await cloud.publish(TOPIC_OBJECT, _fields(1))
        cloud.subscribe({TOPIC_OBJECT}, late.sink)
        await cloud.publish(TOPIC_BEHAVIORAL, _fields(2, BEH))
        return late, both

    late, both = _with_cloud(body)
    assert late.msgs == []
    assert [(m.topic, m.kind) for m in both.msgs] == [(TOPIC_OBJECT, OBJ), (TOPIC_BEHAVIORAL, BEH)]


def test_duplicate_subscription_is_idempotent():
    async def body(cloud, clock):
        lg = Log()
        sub = cloud.subscribe({TOPIC_OBJECT}, lg.sink)
        cloud.broker.add_topics(sub, {TOPIC_OBJECT})
        await cloud.publish(TOPIC_OBJECT, _fields(1))
        return lg, cloud.broker.subscribers(TOPIC_OBJECT)

    lg, n = _with_cloud(body)
    assert len(lg.msgs) == 1 and n == 1


def test_dead_subscriber_dropped():
    async def body(cloud, clock):
        async def dead(msg):
            raise ConnectionError("gone")

        sub = cloud.subscribe({TOPIC_OBJECT}, dead)
        await cloud.publish(TOPIC_OBJECT, _fields(1))
        await clock.sleep(10)
        return sub.dropped, cloud.broker.subscribers(TOPIC_OBJECT)

    assert _with_cloud(body, CloudConfig(0, 0, 0, 0, 0, 0, redelivery_attempts=3)) == (True, 0)


def test_publish_delay_applies():
    async def body(cloud, clock):
        lg = SubscriberLog(clock)
        cloud.subscribe({TOPIC_OBJECT}, lg.sink)
        await cloud.publish(TOPIC_OBJECT, _fields(0))
        await clock.sleep(1)
        return lg.deliveries[0].receipt_ts - clock.origin

    cfg = CloudConfig(publish_delay=0.15, push_delay=0.4)
    assert _with_cloud(body, cfg) == pytest.approx(0.55)


def test_ordered_delivery_with_duplicates_ten_thousand():
    cfg = CloudConfig(0, 0, 0, 0, 0, 0, duplicate_probability=0.1, seed=3)

    async def body(cloud, clock):
        logs = [SubscriberLog(clock) for _ in range(2)]
        raw = [Log() for _ in range(2)]
        for lg, rw in zip(logs, raw):
            async def sink(msg, lg=lg, rw=rw):
                await rw.sink(msg)
                await lg.sink(msg)

            cloud.subscribe({TOPIC_OBJECT, TOPIC_BEHAVIORAL}, sink)
        for i in range(10_000):
            topic = TOPIC_OBJECT if i % 3 else TOPIC_BEHAVIORAL
            await cloud.publish(topic, _fields(i, OBJ if i % 3 else BEH))
        return logs, raw, cloud.broker.published

    logs, raw, published = _with_cloud(body, cfg)
    assert published == 10_000
    for lg, rw in zip(logs, raw):
        for topic in (TOPIC_OBJECT, TOPIC_BEHAVIORAL):
            seqs = [m.seq for m in rw.msgs if m.topic == topic]
            # non-decreasing, gap-free up to duplication
            assert all(b in (a, a + 1) for a, b in zip(seqs, seqs[1:]))
            assert seqs[0] == 1
        assert len(rw.msgs) > 10_000
        assert lg.duplicates == len(rw.msgs) - 10_000
        assert len(lg.deliveries) == 10_000
        assert len({d.event_id for d in lg.deliveries}) == 10_000
        assert lg.order_violations == 0


# ---------------------------------------------------------------------------
# key-value store

def test_put_get_overwrite_and_missing():
    store = KVStore()
    item = KVItem(COUNTS_TABLE, ("c", 1.0), {"person_count": 3})
    store.put_item(item)
    assert store.get_item(COUNTS_TABLE, ("c", 1.0)) == item
    assert store.get_item(COUNTS_TABLE, ("c", 2.0)) is None
    store.put_item(KVItem(COUNTS_TABLE, ("c", 1.0), {"person_count": 5}))
    assert store.get_item(COUNTS_TABLE, ("c", 1.0)).attributes == {"person_count": 5}
    with pytest.raises(CloudError):
        KVItem("Nope", ("c", 1.0))
    with pytest.raises(CloudError):
        KVItem(COUNTS_TABLE, ("c", 1.0), {"bad": [1, 2]})


def test_range_examples():
    store = KVStore()
    assert store.query_range(COUNTS_TABLE, "c", (0, 100)) == []
    for t in range(10):
        store.put_item(KVItem(COUNTS_TABLE, ("c", float(t)), {"i": t}))
    got = store.query_range(COUNTS_TABLE, "c", (3.0, 6.0))
    assert [i.key[1] for i in got] == [3.0, 4.0, 5.0, 6.0]
    assert [i.key[1] for i in store.query_range(COUNTS_TABLE, "c", (7.0, 7.0))] == [7.0]
    with pytest.raises(QueryError):
        store.query_range(COUNTS_TABLE, "c", (5.0, 1.0))


def test_range_equals_snapshot_filter_ten_thousand():
    rng = np.random.default_rng(11)
    store = KVStore()
    cams = ["a", "b", "c"]
    for _ in range(10_000):
        table = COUNTS_TABLE if rng.random() < 0.7 else "AnalyticsTable"
        store.put_item(KVItem(table, (cams[rng.integers(3)], float(rng.integers(0, 5000)) / 10), {"v": int(rng.integers(100))}))
    snap = store.snapshot()
    for _ in range(300):
        table = COUNTS_TABLE if rng.random() < 0.5 else "AnalyticsTable"
        cam = cams[rng.integers(3)]
        t0, t1 = sorted(rng.uniform(-10, 510, 2))
        brute = sorted((i for i in snap if i.table == table and i.key[0] == cam and t0 <= i.key[1] <= t1), key=lambda i: i.key[1])
        assert store.query_range(table, cam, (t0, t1)) == brute


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 100)), max_size=60))
def test_get_never_older_than_completed_put(ops):
    async def body(cloud, clock):
        last: dict[int, int] = {}
        for key, val in ops:
            await cloud.put_item(KVItem(COUNTS_TABLE, ("c", float(key)), {"v": val}))
            last[key] = val
            got = await cloud.get_item(COUNTS_TABLE, ("c", float(key)))
            assert got.attributes["v"] == last[key]
        return True

    assert _with_cloud(body, CloudConfig())


def test_cloud_down_rejects():
    async def body(cloud, clock):
        cloud.available = False
        with pytest.raises(ConnectionError):
            await cloud.put_item(KVItem(COUNTS_TABLE, ("c", 1.0)))
        return cloud.rejected_while_down

    assert _with_cloud(body) == 1


# ---------------------------------------------------------------------------
# statistics

def _counts_store(history, cam="c"):
    store = KVStore()
    for t, n in enumerate(history):
        store.put_item(KVItem(COUNTS_TABLE, (cam, float(t)), {"person_count": n, "count_person": n, "heat_3_4": 1}))
    return store


def test_no_data_convention():
    store = KVStore()
    assert compute_stats(store, StatsQuery("person_count_now", "x")).payload == {"x": 0}
    assert compute_stats(store, StatsQuery("occupancy_indicator", "x")).payload["x"]["level"] == "normal"


def test_constant_history_is_normal():
    res = compute_stats(_counts_store([4, 4, 4, 4, 4]), StatsQuery("occupancy_indicator", "c"))
    assert res.payload["c"]["z"] == 0.0 and res.payload["c"]["level"] == "normal"


def test_z_score_arithmetic():
    history = [8, 12] * 10  # mean 10, population stddev 2
    assert occupancy_z(history, 15) == pytest.approx(2.5)
    res = compute_stats(_counts_store(history + [15]), StatsQuery("occupancy_indicator", "c"))
    assert res.payload["c"]["z"] == pytest.approx(2.5)
    assert res.payload["c"]["level"] == "high"
    assert occupancy_z(history, 7)  == pytest.approx(-1.5)


def test_totals_averages_heatmap():
    store = _counts_store([1, 2, 3])
    assert compute_stats(store, StatsQuery("totals", "c")).payload == {"c": {"person": 6}}
    assert compute_stats(store, StatsQuery("averages", "c")).payload == {"c": {"person": 2.0}}
    grid = compute_stats(store, StatsQuery("heatmap")).payload
    assert len(grid) == 16 and all(len(r) == 16 for r in grid)
    assert grid[3][4] == 3 and sum(map(sum, grid)) == 3
    assert compute_stats(store, StatsQuery("person_count_now", "c")).payload == {"c": 3}


def test_unknown_metric():
    with pytest.raises(QueryError):
        StatsQuery("velocity")


def test_anomaly_list_and_statistical_delays():
    async def body(cloud, clock):
        await cloud.put_item({"table": "AnalyticsTable", "key": ["c", 2.0], "attributes": {"event_ids": "e1", "event_kind": OBJ}})
        t0 = clock.now()
        res = await cloud.stats(StatsQuery("anomaly_list"))
        t1 = clock.now()
        await cloud.stats(StatsQuery("totals"))
        return res.payload, t1 - t0, clock.now() - t1

    payload, action, stat = _with_cloud(body, CloudConfig())
    assert payload == [{"camera_id": "c", "timestamp": 2.0, "event_ids": "e1", "event_kind": OBJ}]
    assert action == pytest.approx(CloudConfig().stats_action_delay)
    assert stat == pytest.approx(CloudConfig().stats_statistical_delay)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=1, max_size=40), st.sampled_from(["person_count_now", "occupancy_indicator", "heatmap", "totals", "averages"]))
def test_stats_pure(history, metric):
    store = _counts_store(history)
    a = compute_stats(store, StatsQuery(metric))
    b = compute_stats(store, StatsQuery(metric))
    assert a == b
    if metric == "occupancy_indicator":
        z = occupancy_z([float(h) for h in history[:-1]], float(history[-1]))
        assert a.payload["c"]["level"] == ("high" if z > 1 else "low" if z < -1 else "normal")
        assert not math.isnan(z)
