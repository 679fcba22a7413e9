"""Length-prefixed JSON framing and the TCP faces of the cloud and global nodes.

A frame is a 4-byte big-endian unsigned payload length followed by that
many bytes of UTF-8 JSON. Every payload is an object with an ``op`` key.
Requests carry a ``req_id`` that the matching RESP/ACK echoes.
"""

from __future__ import annotations

import asyncio
import itertools
import json
import logging
import math
import os
import struct
from typing import Any, Awaitable, Callable, Iterable

import numpy as np

from svs.batch import Batch, Detection, EnrichedBatch, WindowScore
from svs.cloudnode import CloudError, CloudNode, KVItem, NotificationMessage, QueryError, StatsQuery, StatsResult
from svs.scenario import FrameDescriptor

log = logging.getLogger(__name__)

MAX_FRAME = 1 << 20
HEADER = struct.Struct(">I")

SUB, PUB, EVENT, PUT, GET, QUERY, STATS = "SUB", "PUB", "EVENT", "PUT", "GET", "QUERY", "STATS"
RESP, ACK, PING, PONG, INGEST = "RESP", "ACK", "PING", "PONG", "INGEST"
OPS = frozenset({SUB, PUB, EVENT, PUT, GET, QUERY, STATS, RESP, ACK, PING, PONG, INGEST})

DEFAULT_BROKER = ("127.0.0.1", 7400)
BROKER_ENV = "SVS_BROKER_ADDR"


class FrameError(ConnectionError):
    """Malformed or oversize frame; the connection cannot continue."""


class RemoteError(CloudError):
    """The peer answered a request with an error."""


# ---------------------------------------------------------------------------
# framing

def encode_frame(payload: dict) -> bytes:
    body = json.dumps(payload, separators=(",", ":"), allow_nan=False).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise FrameError(f"frame of {len(body)} bytes exceeds the {MAX_FRAME}-byte limit")
    return HEADER.pack(len(body)) + body


def _decode_body(body: bytes) -> dict:
    try:
        payload = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"undecodable frame: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("op") not in OPS:
        raise FrameError(f"frame without a known op: {str(payload)[:80]}")
    return payload


class FrameDecoder:
    """Incremental decoder: feed bytes in arbitrary chunks, collect whole payloads."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[dict]:
        self._buf += data
        out = []
        while len(self._buf) >= HEADER.size:
            (n,) = HEADER.unpack_from(self._buf)
            if n > MAX_FRAME:
                raise FrameError(f"announced frame of {n} bytes exceeds the {MAX_FRAME}-byte limit")
            if len(self._buf) < HEADER.size + n:
                break
            body = bytes(self._buf[HEADER.size:HEADER.size + n])
            del self._buf[:HEADER.size + n]
            out.append(_decode_body(body))
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


async def read_frame(reader: asyncio.StreamReader) -> dict | None:
    """Next payload, or None on a clean end of stream between frames."""
    try:
        head = await reader.readexactly(HEADER.size)
    except asyncio.IncompleteReadError as exc:
        if not exc.partial:
            return None
        raise FrameError("stream ended inside a frame header") from exc
    (n,) = HEADER.unpack(head)
    if n > MAX_FRAME:
        raise FrameError(f"announced frame of {n} bytes exceeds the {MAX_FRAME}-byte limit")
    try:
        body = await reader.readexactly(n)
    except asyncio.IncompleteReadError as exc:
        raise FrameError("stream ended inside a frame body") from exc
    return _decode_body(body)


def parse_addr(text: str | None, default: tuple[str, int] = DEFAULT_BROKER) -> tuple[str, int]:
    if not text:
        return default
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like HOST:PORT, got {text!r}")
    return host or default[0], int(port)


def broker_addr(cli_value: str | None = None) -> tuple[str, int]:
    """Broker address; the environment variable wins over the flag."""
    return parse_addr(os.environ.get(BROKER_ENV) or cli_value)


# ---------------------------------------------------------------------------
# batch encoding (metadata only: no frame content and no ground truth)

def _finite(x: float) -> float | None:
    return None if math.isinf(x) else x


def encode_batch(eb: EnrichedBatch) -> dict:
    dets = []
    for d in eb.all_detections():
        dets.append({
            "frame_index": d.frame_index,
            "class": d.cls,
            "bbox": list(d.bbox),
            "confidence": d.confidence,
            "local_id": d.local_track_id,
            "feature": None if d.feature is None else d.feature.tolist(),
        })
    return {
        "camera_id": eb.camera_id,
        "batch_index": eb.batch_index,
        "frames": [[f.frame_index, f.capture_ts] for f in eb.frames],
        "detections": dets,
        "stage_ts": dict(eb.stage_ts),
        "window_scores": [ws.to_dict() for ws in eb.window_scores],
        "frame_scene_scores": {str(k): v for k, v in sorted(eb.frame_scene_scores.items())},
        "crops": {str(k): v for k, v in sorted(eb.crops.items())},
        "person_count": eb.person_count,
    }


def decode_batch(d: dict) -> EnrichedBatch:
    cam = d["camera_id"]
    frames = [FrameDescriptor(cam, int(f), float(ts)) for f, ts in d["frames"]]
    batch = Batch(cam, int(d["batch_index"]), frames)
    first = batch.first_frame
    per_frame: list[list[Detection]] = [[] for _ in frames]
    for x in d["detections"]:
        f = int(x["frame_index"])
        feat = x.get("feature")
        per_frame[f - first].append(Detection(
            cam, f, x["class"], tuple(float(v) for v in x["bbox"]), float(x["confidence"]),
            x.get("local_id"), None, None if feat is None else np.asarray(feat, dtype=float),
        ))
    windows = [
        WindowScore(
            w["camera_id"], int(w["window_index"]), (int(w["window_span"][0]), int(w["window_span"][1])),
            {int(k): float(v) for k, v in w["person_scores"].items()},
            {int(k): float(v) for k, v in w["frame_scene_scores"].items()},
        )
        for w in d["window_scores"]
    ]
    return EnrichedBatch(
        batch,
        per_frame,
        {k: float(v) for k, v in d["stage_ts"].items()},
        windows,
        {int(k): float(v) for k, v in d["frame_scene_scores"].items()},
        {int(k): int(v) for k, v in d["crops"].items()},
        d.get("person_count"),
    )


# ---------------------------------------------------------------------------
# connection plumbing shared by clients and servers

class _Conn:
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self.reader = reader
        self.writer = writer
        self._lock = asyncio.Lock()
        self.closed = False

    async def send(self, payload: dict) -> None:
        if self.closed:
            raise ConnectionError("connection closed")
        data = encode_frame(payload)
        async with self._lock:
            self.writer.write(data)
            await self.writer.drain()

    async def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass


Handler = Callable[[dict, "_Conn", dict], Awaitable[dict | None]]


class _Server:
    """Accept loop; each request runs as its own task, replies share one write lock."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.host = host
        self.port = port
        self._server: asyncio.AbstractServer | None = None
        self._conns: set[_Conn] = set()
        self.frame_errors = 0

    async def start(self) -> _Server:
        self._server = await asyncio.start_server(self._serve, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        return self

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    async def _serve(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        conn = _Conn(reader, writer)
        self._conns.add(conn)
        state: dict = {}
        tasks: set[asyncio.Task] = set()
        try:
            while True:
                msg = await read_frame(reader)
                if msg is None:
                    break
                t = asyncio.ensure_future(self._dispatch(msg, conn, state))
                tasks.add(t)
                t.add_done_callback(tasks.discard)
        except FrameError as exc:
            self.frame_errors += 1
            log.warning("closing connection after frame error: %s", exc)
        except (ConnectionError, OSError):
            pass
        finally:
            if tasks:
                await asyncio.gather(*tasks, return_exceptions=True)
            await self.on_disconnect(conn, state)
            self._conns.discard(conn)
            await conn.close()

    async def _dispatch(self, msg: dict, conn: _Conn, state: dict) -> None:
        req_id = msg.get("req_id")
        try:
            reply = await self.handle(msg, conn, state)
        except (CloudError, ValueError, KeyError, TypeError, ConnectionError) as exc:
            reply = {"op": RESP, "error": f"{type(exc).__name__}: {exc}"}
        if reply is None:
            return
        if req_id is not None:
            reply["req_id"] = req_id
        try:
            await conn.send(reply)
        except (ConnectionError, OSError):
            pass

    async def handle(self, msg: dict, conn: _Conn, state: dict) -> dict | None:
        if msg["op"] == PING:
            return {"op": PONG}
        raise ValueError(f"unsupported op {msg['op']}")

    async def on_disconnect(self, conn: _Conn, state: dict) -> None:
        return None

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            for c in list(self._conns):
                await c.close()
            await self._server.wait_closed()
            self._server = None


class _Client:
    """Request/response multiplexing over one connection."""

    _ids = itertools.count(1)

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.host = host
        self.port = port
        self.timeout = timeout
        self._conn: _Conn | None = None
        self._pending: dict[int, asyncio.Future] = {}
        self._reader_task: asyncio.Task | None = None

    async def connect(self):
        reader, writer = await asyncio.open_connection(self.host, self.port)
        self._conn = _Conn(reader, writer)
        self._reader_task = asyncio.ensure_future(self._read_loop())
        return self

    async def _read_loop(self) -> None:
        err: Exception = ConnectionError("connection closed by peer")
        try:
            while True:
                msg = await read_frame(self._conn.reader)
                if msg is None:
                    break
                if msg["op"] in (RESP, ACK, PONG):
                    fut = self._pending.pop(msg.get("req_id"), None)
                    if fut is not None and not fut.done():
                        fut.set_result(msg)
                else:
                    await self.on_push(msg)
        except (FrameError, ConnectionError, OSError) as exc:
            err = exc
        finally:
            self._conn.closed = True
            for fut in self._pending.values():
                if not fut.done():
                    fut.set_exception(ConnectionError(str(err)))
            self._pending.clear()
            await self.on_closed()

    async def on_push(self, msg: dict) -> None:
        return None

    async def on_closed(self) -> None:
        return None

    async def request(self, payload: dict) -> dict:
        if self._conn is None or self._conn.closed:
            raise ConnectionError("not connected")
        req_id = next(self._ids)
        fut = asyncio.get_running_loop().create_future()
        self._pending[req_id] = fut
        await self._conn.send({**payload, "req_id": req_id})
        reply = await asyncio.wait_for(fut, self.timeout)
        if "error" in reply:
            raise RemoteError(reply["error"])
        return reply

    async def ping(self) -> float:
        loop = asyncio.get_running_loop()
        t0 = loop.time()
        await self.request({"op": PING})
        return loop.time() - t0

    async def close(self) -> None:
        if self._conn is not None:
            await self._conn.close()
        if self._reader_task is not None:
            await asyncio.gather(self._reader_task, return_exceptions=True)


# ---------------------------------------------------------------------------
# cloud

class CloudServer(_Server):
    """Exposes a CloudNode (broker, store, stats) on a TCP port."""

    def __init__(self, cloud: CloudNode, host: str = "127.0.0.1", port: int = 0):
        super().__init__(host, port)
        self.cloud = cloud

    async def handle(self, msg: dict, conn: _Conn, state: dict) -> dict | None:
        op = msg["op"]
        cloud = self.cloud
        if op == PING:
            return {"op": PONG}
        if op == SUB:
            topics = list(msg.get("topics") or [])
            if not topics:
                raise CloudError("SUB needs at least one topic")
            sub = state.get("sub")
            if sub is None:
                async def sink(m: NotificationMessage) -> None:
                    await conn.send({"op": EVENT, "message": m.to_dict()})

                state["sub"] = cloud.subscribe(topics, sink)
            else:
                cloud.broker.add_topics(sub, topics)
            return {"op": ACK, "topics": sorted(state["sub"].topics)}
        if op == PUB:
            m = await cloud.publish(msg["topic"], msg["message"])
            return {"op": RESP, "seq": m.seq, "publish_ts": m.publish_ts}
        if op == PUT:
            await cloud.put_item(KVItem.from_dict(msg["item"]))
            return {"op": ACK}
        if op == GET:
            item = await cloud.get_item(msg["table"], (msg["key"][0], float(msg["key"][1])))
            return {"op": RESP, "found": item is not None, "item": None if item is None else item.to_dict()}
        if op == QUERY:
            lo, hi = msg["time_range"]
            items = await cloud.query_range(msg["table"], msg["camera_id"], (float(lo), math.inf if hi is None else float(hi)))
            return {"op": RESP, "items": [i.to_dict() for i in items]}
        if op == STATS:
            res = await cloud.stats(StatsQuery.from_dict(msg["query"]))
            return {"op": RESP, "result": res.to_dict()}
        raise ValueError(f"unsupported op {op}")

    async def on_disconnect(self, conn: _Conn, state: dict) -> None:
        sub = state.pop("sub", None)
        if sub is not None:
            self.cloud.unsubscribe(sub)
            await sub.close(drain=False)


class CloudClient(_Client):
    """Remote stand-in for CloudNode with the same coroutine API."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        super().__init__(host, port, timeout)
        self._sink: Callable[[NotificationMessage], Awaitable[None]] | None = None

    async def on_push(self, msg: dict) -> None:
        if msg["op"] == EVENT and self._sink is not None:
            await self._sink(NotificationMessage.from_dict(msg["message"]))

    async def subscribe(self, topics: Iterable[str], sink: Callable[[NotificationMessage], Awaitable[None]]) -> list[str]:
        self._sink = sink
        reply = await self.request({"op": SUB, "topics": sorted(set(topics))})
        return reply["topics"]

    async def publish(self, topic: str, fields: dict) -> dict:
        return await self.request({"op": PUB, "topic": topic, "message": fields})

    async def put_item(self, item: KVItem | dict) -> None:
        if isinstance(item, KVItem):
            item = item.to_dict()
        await self.request({"op": PUT, "item": item})

    async def get_item(self, table: str, key: tuple[str, float]) -> KVItem | None:
        reply = await self.request({"op": GET, "table": table, "key": [key[0], key[1]]})
        return KVItem.from_dict(reply["item"]) if reply["found"] else None

    async def query_range(self, table: str, camera_id: str, time_range: tuple[float, float]) -> list[KVItem]:
        if time_range[0] > time_range[1]:
            raise QueryError("time range is not well-ordered")
        reply = await self.request({"op": QUERY, "table": table, "camera_id": camera_id,
                                    "time_range": [time_range[0], _finite(time_range[1])]})
        return [KVItem.from_dict(i) for i in reply["items"]]

    async def stats(self, query: StatsQuery) -> StatsResult:
        reply = await self.request({"op": STATS, "query": query.to_dict()})
        r = reply["result"]
        return StatsResult(r["metric"], r["payload"])


# ---------------------------------------------------------------------------
# global-node ingest

class IngestServer(_Server):
    """Accepts INGEST frames for a started GlobalNode."""

    def __init__(self, gnode, host: str = "127.0.0.1", port: int = 0):
        super().__init__(host, port)
        self.gnode = gnode

    async def handle(self, msg: dict, conn: _Conn, state: dict) -> dict | None:
        if msg["op"] == PING:
            return {"op": PONG}
        if msg["op"] != INGEST:
            raise ValueError(f"unsupported op {msg['op']}")
        ack = await self.gnode.ingest(decode_batch(msg["batch"]))
        return {"op": ACK, "camera_id": ack.camera_id, "batch_index": ack.batch_index,
                "persist_ts": ack.persist_ts, "duplicate": ack.duplicate,
                "events": [e.event_id for e in ack.events]}


class IngestClient(_Client):
    """Downstream for a LocalNode that lives across a socket from the global node."""

    async def ingest(self, eb: EnrichedBatch) -> dict:
        return await self.request({"op": INGEST, "batch": encode_batch(eb)})


__all__ = [
    "BROKER_ENV",
    "CloudClient",
    "CloudServer",
    "FrameDecoder",
    "FrameError",
    "IngestClient",
    "IngestServer",
    "MAX_FRAME",
    "RemoteError",
    "broker_addr",
    "decode_batch",
    "encode_batch",
    "encode_frame",
    "parse_addr",
    "read_frame",
]
