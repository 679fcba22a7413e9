from __future__ import annotations

import io
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svs.scenario import BEHAVIORAL_ANOMALY, OBJECT_ANOMALY, InjectionSpec
from svs.telemetry import (
    CSV_COLUMNS,
    Delivery,
    LatencyRecord,
    PCPResult,
    PCPSample,
    Recorder,
    RecordsError,
    RunReport,
    compute_metrics,
    describe,
    dump_records,
    empty_report,
    load_records,
    measure_pcp,
    render_report,
)


def _stage_records(cameras=("a",), batches=1200, latency=0.1, period=1.0):
    out = []
    for cam in cameras:
        for k in range(batches):
            t = k * period
            out.append(LatencyRecord("DetectorStage", cam, f"{cam}/{k}", t, t + latency / 2, k))
            out.append(LatencyRecord("ActionStage", cam, f"{cam}/{k}", t, t + latency, k))
            out.append(LatencyRecord("WholeSystem", cam, f"{cam}/{k}", t, t + latency, k))
    return out


# ---------------------------------------------------------------------------
# recorder

def test_record_valid_and_reversed():
    rec = Recorder()
    assert rec.record("WholeSystem", "a", "b0", 1.0, 2.0)
    assert len(rec) == 1
    assert not rec.record("WholeSystem", "a", "b1", 2.0, 1.0)
    assert len(rec) == 1 and rec.rejected == 1
    assert not rec.record("Bogus", "a", "b2", 1.0, 2.0)
    assert rec.rejected == 2


def test_million_records_no_overflow():
    rec = Recorder()
    for i in range(1_000_000):
        rec.record("CloudPut", "a", "r", 0.0, 1.0)
    assert len(rec) == 1_000_000 and rec.overflow == 0


def test_small_capacity_counts_overflow():
    rec = Recorder(capacity=3)
    for _ in range(5):
        rec.record("CloudPut", "a", "r", 0.0, 1.0)
    assert len(rec) == 3 and rec.overflow == 2 and rec.emitted == 5


# ---------------------------------------------------------------------------
# metrics

def test_constant_latency():
    rep = compute_metrics(_stage_records(batches=300), warmup_batches=0, total_batches=None)
    s = rep.stats["WholeSystem"]
    assert s.mean == pytest.approx(0.1) and s.stddev == pytest.approx(0.0, abs=1e-12)


def test_final_thousand_of_twelve_hundred():
    records = _stage_records(cameras=("a", "b", "c"))
    rep = compute_metrics(records, warmup_batches=200, total_batches=1200)
    assert rep.samples_per_camera == {"a": 1000, "b": 1000, "c": 1000}
    assert rep.stats["WholeSystem"].n == 3000
    bk = rep.bookkeeping
    assert bk["emitted"] == bk["aggregated"] + bk["warmup_dropped"] + bk["rejected"]
    assert bk["warmup_dropped"] == 3 * 3 * 200


def test_bookkeeping_with_rejects():
    rec = Recorder()
    for r in _stage_records(batches=250):
        rec.record(r.kind, r.camera_id, r.ref, r.t_start, r.t_end, r.batch_index)
    for _ in range(7):
        rec.record("WholeSystem", "a", "x", 5.0, 4.0)
    rep = compute_metrics(rec.records, 200, 1200, rejected=rec.rejected)
    bk = rep.bookkeeping
    assert bk["rejected"] == 7
    assert bk["emitted"] == rec.emitted == bk["aggregated"] + bk["warmup_dropped"] + bk["rejected"]


def test_five_sample_stddev_by_formula():
    xs = [1.0, 2.0, 4.0, 7.0, 11.0]
    mean = (1 + 2 + 4 + 7 + 11) / 5
    pop = math.sqrt(sum((x - mean) ** 2 for x in xs) / 5)
    samp = math.sqrt(sum((x - mean) ** 2 for x in xs) / 4)
    assert describe(xs).stddev == pytest.approx(pop)
    assert describe(xs, population=False).stddev == pytest.approx(samp)
    assert describe(xs).mean == mean and describe(xs).min == 1.0 and describe(xs).max == 11.0
    assert describe([]) is None


def test_insufficient_data_flagged():
    rep = compute_metrics(_stage_records(batches=100), warmup_batches=200)
    assert set(rep.insufficient_data) == {"DetectorStage", "ActionStage", "WholeSystem"}


def test_fps_from_delivery_times():
    # one batch of 30 frames per second after warm-up
    rep = compute_metrics(_stage_records(batches=400), warmup_batches=200, total_batches=1200)
    assert rep.fps["a"] == pytest.approx(30.0)
    assert rep.fps_aggregate == pytest.approx(30.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 30), st.floats(0, 5), st.floats(0, 5)), max_size=80), st.integers(0, 20))
def test_bookkeeping_identity(rows, warm):
    rec = Recorder()
    for k, a, b in rows:
        rec.record("WholeSystem", "a", str(k), a, b, k)
    rep = compute_metrics(rec.records, warm, None, rejected=rec.rejected)
    bk = rep.bookkeeping
    assert bk["emitted"] == len(rows)
    assert bk["emitted"] == bk["aggregated"] + bk["warmup_dropped"] + bk["rejected"]


# ---------------------------------------------------------------------------
# PCP matching

def _inj(iid, kind, ts, cam="c"):
    return InjectionSpec(iid, cam, kind, int(ts * 30), ts)


def _dlv(eid, kind, trigger, receipt, cam="c"):
    return Delivery(eid, "t", 1, kind, cam, trigger, receipt)


def test_pcp_matches_first_notification():
    sched = [_inj("i1", OBJECT_ANOMALY, 10.0), _inj("i2", BEHAVIORAL_ANOMALY, 40.0)]
    logs = [
        _dlv("e2", OBJECT_ANOMALY, 10.5, 16.0),
        _dlv("e1", OBJECT_ANOMALY, 10.0, 15.0),
        _dlv("e1", OBJECT_ANOMALY, 10.0, 15.5),  # duplicate
        _dlv("e3", BEHAVIORAL_ANOMALY, 41.0, 47.0),
    ]
    res = measure_pcp(sched, logs)
    assert [(s.injection_id, s.latency) for s in res.samples] == [("i1", 5.0), ("i2", 7.0)]
    assert res.missed == [] and res.ambiguous == []


def test_pcp_missed_and_wrong_kind():
    sched = [_inj("i1", OBJECT_ANOMALY, 10.0)]
    res = measure_pcp(sched, [_dlv("e", BEHAVIORAL_ANOMALY, 10.0, 12.0)])
    assert res.missed == ["i1"] and res.unmatched_notifications == 1


def test_pcp_ambiguous_dropped():
    sched = [_inj("i1", OBJECT_ANOMALY, 10.0), _inj("i2", OBJECT_ANOMALY, 11.0)]
    res = measure_pcp(sched, [_dlv("e", OBJECT_ANOMALY, 11.5, 14.0)])
    assert "i2" in res.ambiguous and res.samples == []


def test_pcp_zero_injections():
    res = measure_pcp([], [])
    assert res.samples == [] and res.missed == []
    rep = compute_metrics([], pcp=res)
    assert rep.pcp_samples == {"PCPObject": [], "PCPBehavioral": []}


# ---------------------------------------------------------------------------
# rendering

def _pcp_report(n=30):
    samples = [PCPSample(f"i{i}", OBJECT_ANOMALY, "c", float(i), float(i) + 5 + i / 100, f"e{i}") for i in range(n)]
    return compute_metrics(_stage_records(batches=250), pcp=PCPResult(samples), camera_count=1)


def test_empty_report_headers_only():
    text = render_report(empty_report(), "table")
    assert "cameras" in text
    for line in text.splitlines():
        assert not line[:1].isdigit()
    assert render_report(empty_report(), "csv") == ",".join(CSV_COLUMNS) + "\n"


def test_thirty_samples_thirty_rows():
    rows = render_report(_pcp_report(30), "csv").splitlines()
    assert rows[0] == ",".join(CSV_COLUMNS)
    assert len(rows) == 31
    assert rows[1].startswith("1,object,0,")


def test_render_is_byte_stable():
    rep = _pcp_report()
    for fmt in ("table", "csv", "json"):
        assert render_report(rep, fmt) == render_report(rep, fmt)
    with pytest.raises(ValueError):
        render_report(rep, "xml")


def test_json_round_trip():
    rep = _pcp_report()
    import json

    doc = json.loads(render_report(rep, "json"))
    assert doc["report_version"] == 1
    assert render_report(RunReport.from_dict(doc), "json") == render_report(rep, "json")


# ---------------------------------------------------------------------------
# record files

def _records_file(tmp_path):
    path = tmp_path / "records.jsonl"
    params = {"warmup_batches": 200, "total_batches": 1200, "camera_count": 1, "population": True, "rejected": 0}
    pcp = _pcp_report(3)
    with open(path, "w") as fh:
        dump_records(fh, params, _stage_records(batches=250), PCPResult(
            [PCPSample("i0", OBJECT_ANOMALY, "c", 0.0, 5.0, "e0")]))
    return path, pcp


def test_records_round_trip(tmp_path):
    path, _ = _records_file(tmp_path)
    rf = load_records(path)
    assert len(rf.records) == 750
    rep = rf.report()
    assert rep.samples_per_camera == {"a": 50}
    assert rep.pcp_samples["PCPObject"] == [5.0]


def test_truncated_records_name_offset(tmp_path):
    path, _ = _records_file(tmp_path)
    data = path.read_bytes()
    cut = len(data) // 2
    path.write_bytes(data[:cut])
    with pytest.raises(RecordsError) as err:
        load_records(path)
    assert "byte offset" in str(err.value)
    lines = data[:cut].splitlines(keepends=True)
    assert f"byte offset {sum(map(len, lines[:-1]))}" in str(err.value)


def test_corrupt_line_names_offset(tmp_path):
    path, _ = _records_file(tmp_path)
    lines = path.read_bytes().splitlines(keepends=True)
    lines[5] = b"{not json\n"
    path.write_bytes(b"".join(lines))
    with pytest.raises(RecordsError, match=f"byte offset {sum(map(len, lines[:5]))}"):
        load_records(path)
    with pytest.raises(RecordsError):
        load_records(tmp_path / "missing.jsonl")


def test_dump_to_buffer_counts():
    buf = io.StringIO()
    n = dump_records(buf, {"x": 1}, _stage_records(batches=2), None)
    assert n == 6 and buf.getvalue().count("\n") == 8
