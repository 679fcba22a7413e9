"""Latency records, run metrics, PCP matching and report rendering."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from svs.scenario import BATCH_SIZE, BEHAVIORAL_ANOMALY, OBJECT_ANOMALY, InjectionSpec

REPORT_VERSION = 1

STAGE_KINDS = ("DetectorStage", "ActionStage", "WholeSystem")
CLOUD_KINDS = ("CloudGet", "CloudPut", "CloudPublish", "CloudStats")
PCP_KINDS = ("PCPObject", "PCPBehavioral")
KINDS = STAGE_KINDS + CLOUD_KINDS + PCP_KINDS
PCP_KIND_FOR = {OBJECT_ANOMALY: "PCPObject", BEHAVIORAL_ANOMALY: "PCPBehavioral"}
CSV_KIND_LABEL = {"PCPObject": "object", "PCPBehavioral": "behavior"}
CSV_COLUMNS = ("camera_count", "anomaly_kind", "sample_index", "latency_seconds")
FORMATS = ("table", "csv", "json")

DEFAULT_CAPACITY = 1 << 21


@dataclass(frozen=True, slots=True)
class LatencyRecord:
    kind: str
    camera_id: str
    ref: str
    t_start: float
    t_end: float
    batch_index: int | None = None

    @property
    def latency(self) -> float:
        return self.t_end - self.t_start

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "camera_id": self.camera_id, "ref": self.ref,
             "t_start": self.t_start, "t_end": self.t_end}
        if self.batch_index is not None:
            d["batch_index"] = self.batch_index
        return d

    @classmethod
    def from_dict(cls, d: dict) -> LatencyRecord:
        if d["kind"] not in KINDS:
            raise ValueError(f"unknown record kind {d['kind']!r}")
        return cls(d["kind"], d["camera_id"], d["ref"], float(d["t_start"]), float(d["t_end"]), d.get("batch_index"))


class Recorder:
    """Append-only record buffer; never blocks, counts rejects and overflow."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        self.capacity = capacity
        self.records: list[LatencyRecord] = []
        self.rejected = 0
        self.overflow = 0

    def record(self, kind: str, camera_id: str, ref: str, t_start: float, t_end: float,
               batch_index: int | None = None) -> bool:
        if kind not in KINDS or not (t_end >= t_start):
            self.rejected += 1
            return False
        if len(self.records) >= self.capacity:
            self.overflow += 1
            return False
        self.records.append(LatencyRecord(kind, camera_id, ref, t_start, t_end, batch_index))
        return True

    def __len__(self) -> int:
        return len(self.records)

    @property
    def emitted(self) -> int:
        return len(self.records) + self.rejected + self.overflow


# ---------------------------------------------------------------------------
# statistics

@dataclass
class KindStats:
    n: int
    mean: float
    min: float
    max: float
    stddev: float

    def to_dict(self) -> dict:
        return {"n": self.n, "mean": self.mean, "min": self.min, "max": self.max, "stddev": self.stddev}


def describe(values: Sequence[float], population: bool = True) -> KindStats | None:
    n = len(values)
    if n == 0:
        return None
    mean = math.fsum(values) / n
    ddof = 0 if population else 1
    var = math.fsum((v - mean) ** 2 for v in values) / (n - ddof) if n - ddof > 0 else 0.0
    return KindStats(n, mean, min(values), max(values), math.sqrt(var))


@dataclass
class PCPSample:
    injection_id: str
    kind: str
    camera_id: str
    ground_truth_ts: float
    receipt_ts: float
    event_id: str

    @property
    def latency(self) -> float:
        return self.receipt_ts - self.ground_truth_ts

    def to_dict(self) -> dict:
        return {"injection_id": self.injection_id, "kind": self.kind, "camera_id": self.camera_id,
                "ground_truth_ts": self.ground_truth_ts, "receipt_ts": self.receipt_ts,
                "event_id": self.event_id, "latency": self.latency}

    @classmethod
    def from_dict(cls, d: dict) -> PCPSample:
        return cls(d["injection_id"], d["kind"], d["camera_id"], float(d["ground_truth_ts"]),
                   float(d["receipt_ts"]), d["event_id"])


@dataclass
class PCPResult:
    samples: list[PCPSample] = field(default_factory=list)
    missed: list[str] = field(default_factory=list)
    ambiguous: list[str] = field(default_factory=list)
    unmatched_notifications: int = 0

    def by_kind(self, kind: str) -> list[PCPSample]:
        return [s for s in self.samples if s.kind == kind]

    def records(self) -> list[LatencyRecord]:
        return [
            LatencyRecord(PCP_KIND_FOR[s.kind], s.camera_id, f"injection:{s.injection_id}", s.ground_truth_ts, s.receipt_ts)
            for s in self.samples
        ]


@dataclass(frozen=True)
class Delivery:
    """One notification as logged by a subscriber client."""

    event_id: str
    topic: str
    seq: int
    kind: str
    camera_id: str
    trigger_ts: float
    receipt_ts: float

    def to_dict(self) -> dict:
        return {"event_id": self.event_id, "topic": self.topic, "seq": self.seq, "kind": self.kind,
                "camera_id": self.camera_id, "trigger_ts": self.trigger_ts, "receipt_ts": self.receipt_ts}

    @classmethod
    def from_dict(cls, d: dict) -> Delivery:
        return cls(d["event_id"], d["topic"], int(d["seq"]), d["kind"], d["camera_id"],
                   float(d["trigger_ts"]), float(d["receipt_ts"]))


def measure_pcp(
    schedule: Sequence[InjectionSpec],
    deliveries: Iterable[Delivery],
    match_horizon: float = 10.0,
    tolerance: float = 1e-9,
) -> PCPResult:
    """Pair each injection with the first notification whose trigger maps to it.

    A notification maps to the latest injection of the same kind on the same
    camera whose ground-truth time is at or before its trigger time and at
    most ``match_horizon`` seconds earlier. When a second injection also lies
    inside that horizon the pairing is ambiguous and the sample is dropped.
    """
    result = PCPResult()
    by_lane: dict[tuple[str, str], list[InjectionSpec]] = {}
    for inj in schedule:
        if inj.ground_truth_ts is None:
            raise ValueError(f"injection {inj.injection_id} has no ground_truth_ts")
        by_lane.setdefault((inj.camera_id, inj.kind), []).append(inj)
    for lane in by_lane.values():
        lane.sort(key=lambda i: (i.ground_truth_ts, i.injection_id))

    first: dict[str, Delivery] = {}
    ambiguous: set[str] = set()
    seen_events: set[str] = set()
    for d in sorted(deliveries, key=lambda d: (d.receipt_ts, d.event_id)):
        if d.event_id in seen_events:
            continue
        seen_events.add(d.event_id)
        lane = by_lane.get((d.camera_id, d.kind), [])
        cands = [i for i in lane
                 if i.ground_truth_ts <= d.trigger_ts + tolerance and d.trigger_ts - i.ground_truth_ts <= match_horizon]
        if not cands:
            result.unmatched_notifications += 1
            continue
        inj = cands[-1]
        if len(cands) > 1:
            ambiguous.add(inj.injection_id)
            continue
        if inj.injection_id not in first:
            first[inj.injection_id] = d

    for inj in sorted(schedule, key=lambda i: (i.ground_truth_ts, i.injection_id)):
        if inj.injection_id in ambiguous:
            result.ambiguous.append(inj.injection_id)
            continue
        d = first.get(inj.injection_id)
        if d is None:
            result.missed.append(inj.injection_id)
            continue
        result.samples.append(PCPSample(inj.injection_id, inj.kind, inj.camera_id, inj.ground_truth_ts, d.receipt_ts, d.event_id))
    return result


# ---------------------------------------------------------------------------
# run report

@dataclass
class RunReport:
    camera_count: int
    warmup_batches: int
    total_batches: int | None
    stddev_mode: str
    stats: dict[str, KindStats | None]
    per_camera: dict[str, dict[str, KindStats | None]]
    fps: dict[str, float | None]
    fps_aggregate: float | None
    samples_per_camera: dict[str, int]
    bookkeeping: dict[str, int]
    pcp_samples: dict[str, list[float]] = field(default_factory=dict)
    pcp_missed: list[str] = field(default_factory=list)
    pcp_ambiguous: list[str] = field(default_factory=list)
    insufficient_data: list[str] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def sd(s):
            return None if s is None else s.to_dict()

        return {
            "report_version": REPORT_VERSION,
            "camera_count": self.camera_count,
            "warmup_policy": {"warmup_batches": self.warmup_batches, "total_batches": self.total_batches,
                              "stddev": self.stddev_mode},
            "stats": {k: sd(v) for k, v in self.stats.items()},
            "per_camera": {cam: {k: sd(v) for k, v in kinds.items()} for cam, kinds in self.per_camera.items()},
            "fps": {"per_camera": self.fps, "aggregate": self.fps_aggregate},
            "samples_per_camera": self.samples_per_camera,
            "bookkeeping": self.bookkeeping,
            "pcp": {"samples": self.pcp_samples, "missed": self.pcp_missed, "ambiguous": self.pcp_ambiguous},
            "insufficient_data": self.insufficient_data,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunReport:
        if d.get("report_version") != REPORT_VERSION:
            raise ValueError(f"unsupported report_version {d.get('report_version')!r}")

        def ks(v):
            return None if v is None else KindStats(**v)

        wp = d["warmup_policy"]
        return cls(
            camera_count=d["camera_count"],
            warmup_batches=wp["warmup_batches"],
            total_batches=wp["total_batches"],
            stddev_mode=wp["stddev"],
            stats={k: ks(v) for k, v in d["stats"].items()},
            per_camera={c: {k: ks(v) for k, v in kinds.items()} for c, kinds in d["per_camera"].items()},
            fps=d["fps"]["per_camera"],
            fps_aggregate=d["fps"]["aggregate"],
            samples_per_camera=d["samples_per_camera"],
            bookkeeping=d["bookkeeping"],
            pcp_samples=d["pcp"]["samples"],
            pcp_missed=d["pcp"]["missed"],
            pcp_ambiguous=d["pcp"]["ambiguous"],
            insufficient_data=d["insufficient_data"],
            extra=d.get("extra", {}),
        )

    def mean(self, kind: str) -> float | None:
        s = self.stats.get(kind)
        return None if s is None else s.mean


def compute_metrics(
    records: Sequence[LatencyRecord],
    warmup_batches: int = 200,
    total_batches: int | None = 1200,
    camera_count: int | None = None,
    population: bool = True,
    rejected: int = 0,
    pcp: PCPResult | None = None,
) -> RunReport:
    """Aggregate a finished run.

    Stage records are dropped when their batch index falls inside the
    warm-up; cloud and PCP records carry no batch and are all kept.
    """
    kept: dict[str, list[LatencyRecord]] = {k: [] for k in KINDS}
    per_cam: dict[str, dict[str, list[float]]] = {}
    whole_by_cam: dict[str, list[LatencyRecord]] = {}
    warm_dropped = 0
    cameras: set[str] = set()
    all_records = list(records)
    if pcp is not None:
        all_records += pcp.records()
    for r in all_records:
        if r.kind in STAGE_KINDS:
            cameras.add(r.camera_id)
            if r.kind == "WholeSystem":
                whole_by_cam.setdefault(r.camera_id, []).append(r)
            if r.batch_index is not None and r.batch_index < warmup_batches:
                warm_dropped += 1
                continue
            if total_batches is not None and r.batch_index is not None and r.batch_index >= total_batches:
                # beyond the configured run length: not part of this measurement
                warm_dropped += 1
                continue
        kept[r.kind].append(r)
        per_cam.setdefault(r.camera_id, {}).setdefault(r.kind, []).append(r.latency)

    stats = {k: describe([r.latency for r in kept[k]], population) for k in KINDS}
    per_camera = {
        cam: {k: describe(per_cam.get(cam, {}).get(k, []), population) for k in STAGE_KINDS}
        for cam in sorted(cameras)
    }
    samples_per_camera = {cam: len(per_cam.get(cam, {}).get("WholeSystem", [])) for cam in sorted(cameras)}

    fps: dict[str, float | None] = {}
    for cam in sorted(cameras):
        fps[cam] = _fps(whole_by_cam.get(cam, []), warmup_batches, total_batches)
    finite = [v for v in fps.values() if v is not None]
    fps_aggregate = math.fsum(finite) if finite else None

    insufficient = [k for k in STAGE_KINDS if stats[k] is None]
    n_stage = sum(len(kept[k]) for k in STAGE_KINDS)
    bookkeeping = {
        "emitted": len(all_records) + rejected,
        "aggregated": sum(len(v) for v in kept.values()),
        "aggregated_stage": n_stage,
        "warmup_dropped": warm_dropped,
        "rejected": rejected,
    }
    report = RunReport(
        camera_count=camera_count if camera_count is not None else len(cameras),
        warmup_batches=warmup_batches,
        total_batches=total_batches,
        stddev_mode="population" if population else "sample",
        stats=stats,
        per_camera=per_camera,
        fps=fps,
        fps_aggregate=fps_aggregate,
        samples_per_camera=samples_per_camera,
        bookkeeping=bookkeeping,
        insufficient_data=insufficient,
    )
    if pcp is not None:
        report.pcp_samples = {
            PCP_KIND_FOR[k]: [s.latency for s in pcp.by_kind(k)] for k in (OBJECT_ANOMALY, BEHAVIORAL_ANOMALY)
        }
        report.pcp_missed = list(pcp.missed)
        report.pcp_ambiguous = list(pcp.ambiguous)
    return report


def _fps(whole: list[LatencyRecord], warmup: int, total: int | None) -> float | None:
    """Post-warm-up frames over the time the camera took to deliver them.

    The clock starts at the delivery of the last warm-up batch, or at the
    first post-warm-up delivery when there is no warm-up.
    """
    by_index = {r.batch_index: r.t_end for r in whole if r.batch_index is not None}
    post = sorted(i for i in by_index if i >= warmup and (total is None or i < total))
    if not post:
        return None
    if warmup - 1 in by_index:
        start, n = by_index[warmup - 1], len(post)
    else:
        start, n = by_index[post[0]], len(post) - 1
    elapsed = by_index[post[-1]] - start
    if n <= 0 or elapsed <= 0:
        return None
    return n * BATCH_SIZE / elapsed


# ---------------------------------------------------------------------------
# rendering

def _fmt(v: float | None, digits: int = 2) -> str:
    return "-" if v is None else f"{v:.{digits}f}"


def _stat(report: RunReport, kind: str, attr: str = "mean") -> float | None:
    s = report.stats.get(kind)
    return None if s is None else getattr(s, attr)


def _pcp_stats(report: RunReport, kind: str) -> KindStats | None:
    values = report.pcp_samples.get(kind, [])
    return describe(values, report.stddev_mode == "population")


def _table(headers: Sequence[str], rows: list[Sequence[str]]) -> str:
    widths = [len(h) for h in headers]
    for row in rows:
        widths = [max(w, len(c)) for w, c in zip(widths, row)]
    line = "  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()
    out = [line, "  ".join("-" * w for w in widths)]
    for row in rows:
        out.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(out)


def render_table(reports: Sequence[RunReport]) -> str:
    reports = sorted(reports, key=lambda r: r.camera_count)
    parts = []

    rows = []
    for r in reports:
        if all(_stat(r, k) is None for k in STAGE_KINDS) and r.fps_aggregate is None:
            continue
        fps_cam = [v for v in r.fps.values() if v is not None]
        rows.append([
            str(r.camera_count),
            _fmt(_stat(r, "DetectorStage")),
            _fmt(_stat(r, "ActionStage")),
            _fmt(_stat(r, "WholeSystem")),
            _fmt(sum(fps_cam) / len(fps_cam) if fps_cam else None),
            _fmt(r.fps_aggregate),
            str(sum(r.samples_per_camera.values())),
        ])
    parts.append("Local node latency (s) and throughput\n" + _table(
        ["cameras", "detector", "action", "whole", "fps/camera", "fps total", "samples"], rows))

    rows = []
    for r in reports:
        if all(_stat(r, k) is None for k in CLOUD_KINDS):
            continue
        rows.append([str(r.camera_count)] + [_fmt(None if _stat(r, k) is None else _stat(r, k) * 1000.0, 1) for k in CLOUD_KINDS])
    parts.append("Cloud service latency (ms)\n" + _table(["cameras", "get", "put", "publish", "stats"], rows))

    pcp_reports = [r for r in reports if any(r.pcp_samples.values()) or r.pcp_missed or r.pcp_ambiguous]
    rows = []
    for r in pcp_reports:
        o, b = _pcp_stats(r, "PCPObject"), _pcp_stats(r, "PCPBehavioral")
        rows.append([str(r.camera_count), _fmt(o.mean if o else None), _fmt(b.mean if b else None),
                     str(len(r.pcp_missed)), str(len(r.pcp_ambiguous))])
    parts.append("Mean PCP latency (s)\n" + _table(["cameras", "object", "behaviour", "missed", "ambiguous"], rows))

    rows = []
    for r in pcp_reports:
        for kind, label in (("PCPObject", "object"), ("PCPBehavioral", "behaviour")):
            s = _pcp_stats(r, kind)
            rows.append([str(r.camera_count), label, str(s.n if s else 0), _fmt(s.min if s else None),
                         _fmt(s.max if s else None), _fmt(s.stddev if s else None)])
    parts.append("PCP latency spread (s)\n" + _table(["cameras", "anomaly", "n", "min", "max", "stddev"], rows))
    return "\n\n".join(parts) + "\n"


def render_csv(reports: Sequence[RunReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in sorted(reports, key=lambda r: r.camera_count):
        for kind in PCP_KINDS:
            for i, v in enumerate(r.pcp_samples.get(kind, [])):
                w.writerow([r.camera_count, CSV_KIND_LABEL[kind], i, repr(float(v))])
    return buf.getvalue()


def render_json(reports: Sequence[RunReport]) -> str:
    if len(reports) == 1:
        doc: Any = reports[0].to_dict()
    else:
        doc = {"report_version": REPORT_VERSION, "runs": [r.to_dict() for r in sorted(reports, key=lambda r: r.camera_count)]}
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def render_report(report: RunReport | Sequence[RunReport], fmt: str = "table") -> str:
    reports = [report] if isinstance(report, RunReport) else list(report)
    if fmt == "table":
        return render_table(reports)
    if fmt == "csv":
        return render_csv(reports)
    if fmt == "json":
        return render_json(reports)
    raise ValueError(f"unknown report format {fmt!r}; expected one of {FORMATS}")


def empty_report(camera_count: int = 0) -> RunReport:
    return compute_metrics([], camera_count=camera_count, pcp=PCPResult())


# ---------------------------------------------------------------------------
# raw record files

RECORDS_FORMAT = "svs-records/1"


class RecordsError(ValueError):
    """A records file is missing, truncated or corrupt."""


@dataclass
class RecordsFile:
    params: dict[str, Any]
    records: list[LatencyRecord]
    pcp: PCPResult | None

    def report(self) -> RunReport:
        p = self.params
        rep = compute_metrics(
            self.records,
            warmup_batches=p["warmup_batches"],
            total_batches=p["total_batches"],
            camera_count=p["camera_count"],
            population=p["population"],
            rejected=p["rejected"],
            pcp=self.pcp,
        )
        rep.extra = p.get("extra", {})
        return rep


def dump_records(fh, params: dict[str, Any], records: Iterable[LatencyRecord], pcp: PCPResult | None) -> int:
    """Write one JSON object per line: header, records, PCP outcome, end marker."""
    n = 0
    fh.write(json.dumps({"type": "header", "format": RECORDS_FORMAT, **params}, sort_keys=True) + "\n")
    for r in records:
        fh.write(json.dumps({"type": "record", **r.to_dict()}, sort_keys=True) + "\n")
        n += 1
    if pcp is not None:
        fh.write(json.dumps({"type": "pcp", "samples": [s.to_dict() for s in pcp.samples], "missed": pcp.missed,
                             "ambiguous": pcp.ambiguous, "unmatched": pcp.unmatched_notifications},
                            sort_keys=True) + "\n")
    fh.write(json.dumps({"type": "end", "records": n}, sort_keys=True) + "\n")
    return n


def load_records(path) -> RecordsFile:
    """Parse a records file; every error names the byte offset where it was found."""
    try:
        data = open(path, "rb").read()
    except FileNotFoundError as exc:
        raise RecordsError(f"{path}: no records file") from exc
    params: dict[str, Any] | None = None
    records: list[LatencyRecord] = []
    pcp: PCPResult | None = None
    offset = 0
    ended = False
    for lineno, raw in enumerate(data.splitlines(keepends=True), 1):
        where = f"{path}: byte offset {offset} (line {lineno})"
        if ended:
            raise RecordsError(f"{where}: data after the end marker")
        if not raw.endswith(b"\n"):
            raise RecordsError(f"{where}: truncated line")
        try:
            obj = json.loads(raw)
            kind = obj["type"]
            if params is None and kind != "header":
                raise ValueError("file does not start with a header")
            if kind == "header":
                if params is not None or obj.get("format") != RECORDS_FORMAT:
                    raise ValueError("unexpected header")
                params = {k: v for k, v in obj.items() if k not in ("type", "format")}
            elif kind == "record":
                records.append(LatencyRecord.from_dict(obj))
            elif kind == "pcp":
                pcp = PCPResult([PCPSample.from_dict(s) for s in obj["samples"]], list(obj["missed"]),
                                list(obj["ambiguous"]), int(obj["unmatched"]))
            elif kind == "end":
                if obj["records"] != len(records):
                    raise ValueError(f"end marker counts {obj['records']} records, found {len(records)}")
                ended = True
            else:
                raise ValueError(f"unknown line type {kind!r}")
        except (ValueError, KeyError, TypeError) as exc:
            raise RecordsError(f"{where}: corrupt record: {exc}") from exc
        offset += len(raw)
    if not ended:
        raise RecordsError(f"{path}: byte offset {offset}: truncated, no end marker")
    return RecordsFile(params, records, pcp)

