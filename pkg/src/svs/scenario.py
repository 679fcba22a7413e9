"""Scripted synthetic scenes.

A scenario describes, per camera, who walks where and when, what they carry
and how they move. Frames are generated as ground-truth descriptors (boxes,
17-point skeletons, visible objects) instead of pixels, so every downstream
stage is deterministic and the anomaly injections have exact timestamps.
"""

from __future__ import annotations

import bisect
import json
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

FRAME_W = 1280
FRAME_H = 720
NUM_KEYPOINTS = 17
BATCH_SIZE = 30

# kinematic separation thresholds, px/frame of mean keypoint displacement
V_IDLE = 0.5
V_ANOM = 4.0

SUSPICIOUS_CLASSES = frozenset({"backpack", "gun", "knife"})
MOTION_PROFILES = ("idle", "walk", "run", "fall", "fight")
ANOMALOUS_PROFILES = frozenset({"run", "fall", "fight"})

OBJECT_ANOMALY = "ObjectAnomaly"
BEHAVIORAL_ANOMALY = "BehavioralAnomaly"
INJECTION_KINDS = (OBJECT_ANOMALY, BEHAVIORAL_ANOMALY)

# nominal (w, h) at the far edge of the plane; boxes grow towards the camera
CLASS_SIZE = {
    "person": (60.0, 160.0),
    "vehicle": (220.0, 120.0),
    "backpack": (30.0, 40.0),
    "gun": (24.0, 14.0),
    "knife": (20.0, 8.0),
}
DEFAULT_SIZE = (40.0, 40.0)

# COCO skeleton as fractions of the person box, relative to its centre
KEYPOINT_TEMPLATE = np.array(
    [
        (0.00, -0.42), (-0.04, -0.45), (0.04, -0.45), (-0.08, -0.43), (0.08, -0.43),
        (-0.20, -0.30), (0.20, -0.30), (-0.27, -0.12), (0.27, -0.12),
        (-0.30, 0.05), (0.30, 0.05), (-0.12, 0.05), (0.12, 0.05),
        (-0.13, 0.27), (0.13, 0.27), (-0.14, 0.47), (0.14, 0.47),
    ]
)
LIMB_KEYPOINTS = np.array([7, 8, 9, 10, 13, 14, 15, 16])

# per-frame keypoint step of each motion profile (triangle wave, period 4)
PROFILE_STEP = {"idle": 0.0, "walk": 0.25, "run": 2.5, "fall": 5.5, "fight": 6.0}
# trajectory speed allowed under a profile so that the kinematic bands hold
MAX_SPEED_IDLE = V_IDLE / 2
MAX_SPEED_ANOMALOUS = 1.0
_TRIANGLE = np.array([0.0, 1.0, 2.0, 1.0])


class ScenarioError(ValueError):
    """Scenario file could not be parsed or violates an invariant."""


def stable_hash(*parts: Any) -> int:
    return zlib.crc32("\x1f".join(str(p) for p in parts).encode())


def perspective_scale(y: np.ndarray | float) -> np.ndarray | float:
    return 0.6 + 0.6 * (np.asarray(y) / FRAME_H)


@dataclass(frozen=True)
class CameraSpec:
    camera_id: str
    location_label: str = ""
    reporting: bool = False


@dataclass(frozen=True)
class CarriedObject:
    cls: str
    visible_from_frame: int
    visible_to_frame: int

    def visible_at(self, frame_index: int) -> bool:
        return self.visible_from_frame <= frame_index <= self.visible_to_frame


@dataclass(frozen=True)
class BehaviorSegment:
    from_frame: int
    to_frame: int
    motion_profile: str

    def covers(self, frame_index: int) -> bool:
        return self.from_frame <= frame_index <= self.to_frame


@dataclass(frozen=True)
class EntitySpec:
    entity_id: str
    cls: str
    trajectory: tuple[tuple[int, float, float], ...]
    carried_objects: tuple[CarriedObject, ...] = ()
    behavior_segments: tuple[BehaviorSegment, ...] = ()
    camera_id: str | None = None
    # cross-camera person identity; defaults to entity_id
    identity: str | None = None

    @property
    def first_frame(self) -> int:
        return self.trajectory[0][0]

    @property
    def last_frame(self) -> int:
        return self.trajectory[-1][0]

    @property
    def person_identity(self) -> str:
        return self.identity or self.entity_id

    def active_at(self, frame_index: int) -> bool:
        return self.first_frame <= frame_index <= self.last_frame

    def position_at(self, frame_index: float) -> tuple[float, float]:
        frames = [w[0] for w in self.trajectory]
        x = float(np.interp(frame_index, frames, [w[1] for w in self.trajectory]))
        y = float(np.interp(frame_index, frames, [w[2] for w in self.trajectory]))
        return x, y

    def profile_at(self, frame_index: int) -> str:
        for seg in self.behavior_segments:
            if seg.covers(frame_index):
                return seg.motion_profile
        return "walk" if self.cls == "person" else "idle"


@dataclass(frozen=True)
class InjectionSpec:
    injection_id: str
    camera_id: str
    kind: str
    frame_index: int
    ground_truth_ts: float | None = None


@dataclass(frozen=True)
class Scenario:
    cameras: tuple[CameraSpec, ...]
    entities: tuple[EntitySpec, ...]
    injections: tuple[InjectionSpec, ...]
    duration_frames: int
    frame_rate: float = 30.0
    seed: int = 0

    @cached_property
    def camera_ids(self) -> tuple[str, ...]:
        return tuple(c.camera_id for c in self.cameras)

    def camera(self, camera_id: str) -> CameraSpec:
        for cam in self.cameras:
            if cam.camera_id == camera_id:
                return cam
        raise ScenarioError(f"unknown camera_id {camera_id!r}")

    @cached_property
    def _camera_index(self) -> dict[str, tuple[list[int], list[EntitySpec]]]:
        index: dict[str, tuple[list[int], list[EntitySpec]]] = {}
        for cam in self.cameras:
            ents = sorted(
                (e for e in self.entities if e.camera_id == cam.camera_id),
                key=lambda e: (e.first_frame, e.entity_id),
            )
            index[cam.camera_id] = ([e.first_frame for e in ents], ents)
        return index

    def entities_on(self, camera_id: str, start: int = 0, stop: int | None = None) -> list[EntitySpec]:
        """Entities of ``camera_id`` whose lifetime intersects ``[start, stop)``."""
        firsts, ents = self._camera_index[camera_id]
        stop = self.duration_frames if stop is None else stop
        hi = bisect.bisect_left(firsts, stop)
        return [e for e in ents[:hi] if e.last_frame >= start]

    def with_cameras(self, camera_ids: Sequence[str]) -> Scenario:
        keep = set(camera_ids)
        return Scenario(
            cameras=tuple(c for c in self.cameras if c.camera_id in keep),
            entities=tuple(e for e in self.entities if e.camera_id in keep),
            injections=tuple(i for i in self.injections if i.camera_id in keep),
            duration_frames=self.duration_frames,
            frame_rate=self.frame_rate,
            seed=self.seed,
        )

    def with_duration(self, duration_frames: int) -> Scenario:
        return Scenario(
            cameras=self.cameras,
            entities=self.entities,
            injections=tuple(i for i in self.injections if i.frame_index < duration_frames),
            duration_frames=duration_frames,
            frame_rate=self.frame_rate,
            seed=self.seed,
        )


# ---------------------------------------------------------------------------
# schema

def _require(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise ScenarioError(f"{where}: {msg}")


def _get(d: dict, key: str, where: str, default: Any = ...) -> Any:
    if key in d:
        return d[key]
    if default is ...:
        raise ScenarioError(f"{where}: missing field {key!r}")
    return default


def _as_int(v: Any, where: str) -> int:
    _require(isinstance(v, int) and not isinstance(v, bool), where, f"expected integer, got {v!r}")
    return v


def _as_num(v: Any, where: str) -> float:
    _require(isinstance(v, (int, float)) and not isinstance(v, bool), where, f"expected number, got {v!r}")
    return float(v)


def scenario_from_dict(doc: dict) -> Scenario:
    """Build a Scenario from its JSON document form and validate it."""
    _require(isinstance(doc, dict), "<root>", "expected a JSON object")
    cams_raw = _get(doc, "cameras", "<root>")
    _require(isinstance(cams_raw, list), "cameras", "expected a list")
    cameras = []
    for i, c in enumerate(cams_raw):
        where = f"cameras[{i}]"
        _require(isinstance(c, dict), where, "expected an object")
        cameras.append(
            CameraSpec(
                camera_id=str(_get(c, "camera_id", where)),
                location_label=str(_get(c, "location_label", where, "")),
                reporting=bool(_get(c, "reporting", where, False)),
            )
        )

    only_camera = cameras[0].camera_id if len(cameras) == 1 else None
    entities = []
    for i, e in enumerate(_get(doc, "entities", "<root>")):
        where = f"entities[{i}]"
        _require(isinstance(e, dict), where, "expected an object")
        traj = []
        for j, wp in enumerate(_get(e, "trajectory", where)):
            w = f"{where}.trajectory[{j}]"
            _require(isinstance(wp, (list, tuple)) and len(wp) == 3, w, "expected [frame_index, x, y]")
            traj.append((_as_int(wp[0], w), _as_num(wp[1], w), _as_num(wp[2], w)))
        carried = []
        for j, co in enumerate(_get(e, "carried_objects", where, [])):
            w = f"{where}.carried_objects[{j}]"
            _require(isinstance(co, (list, tuple)) and len(co) == 3, w, "expected [class, visible_from_frame, visible_to_frame]")
            carried.append(CarriedObject(str(co[0]), _as_int(co[1], w), _as_int(co[2], w)))
        segments = []
        for j, seg in enumerate(_get(e, "behavior_segments", where, [])):
            w = f"{where}.behavior_segments[{j}]"
            _require(isinstance(seg, (list, tuple)) and len(seg) == 3, w, "expected [from_frame, to_frame, motion_profile]")
            segments.append(BehaviorSegment(_as_int(seg[0], w), _as_int(seg[1], w), str(seg[2])))
        cam_id = e.get("camera_id", only_camera)
        entities.append(
            EntitySpec(
                entity_id=str(_get(e, "entity_id", where)),
                cls=str(_get(e, "class", where)),
                trajectory=tuple(traj),
                carried_objects=tuple(carried),
                behavior_segments=tuple(sorted(segments, key=lambda s: s.from_frame)),
                camera_id=None if cam_id is None else str(cam_id),
                identity=None if e.get("identity") is None else str(e["identity"]),
            )
        )

    injections = []
    for i, inj in enumerate(_get(doc, "injections", "<root>")):
        where = f"injections[{i}]"
        _require(isinstance(inj, dict), where, "expected an object")
        injections.append(
            InjectionSpec(
                injection_id=str(_get(inj, "injection_id", where)),
                camera_id=str(_get(inj, "camera_id", where)),
                kind=str(_get(inj, "kind", where)),
                frame_index=_as_int(_get(inj, "frame_index", where), f"{where}.frame_index"),
            )
        )

    scenario = Scenario(
        cameras=tuple(cameras),
        entities=tuple(entities),
        injections=tuple(injections),
        duration_frames=_as_int(_get(doc, "duration_frames", "<root>"), "duration_frames"),
        frame_rate=_as_num(_get(doc, "frame_rate", "<root>", 30.0), "frame_rate"),
        seed=_as_int(_get(doc, "seed", "<root>", 0), "seed"),
    )
    validate(scenario)
    return scenario


def scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "cameras": [
            {"camera_id": c.camera_id, "location_label": c.location_label, "reporting": c.reporting}
            for c in scenario.cameras
        ],
        "entities": [
            {
                "entity_id": e.entity_id,
                "class": e.cls,
                "camera_id": e.camera_id,
                **({"identity": e.identity} if e.identity else {}),
                "trajectory": [list(w) for w in e.trajectory],
                "carried_objects": [[o.cls, o.visible_from_frame, o.visible_to_frame] for o in e.carried_objects],
                "behavior_segments": [[s.from_frame, s.to_frame, s.motion_profile] for s in e.behavior_segments],
            }
            for e in scenario.entities
        ],
        "injections": [
            {"injection_id": i.injection_id, "camera_id": i.camera_id, "kind": i.kind, "frame_index": i.frame_index}
            for i in scenario.injections
        ],
        "duration_frames": scenario.duration_frames,
        "frame_rate": scenario.frame_rate,
        "seed": scenario.seed,
    }


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return scenario_from_dict(doc)


def dump_scenario(scenario: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(scenario), separators=(",", ":")) + "\n", encoding="utf-8")


def bundled_scenario_path(name: str) -> Path:
    return Path(__file__).parent / "data" / f"{name}.json"


def load_bundled(name: str) -> Scenario:
    return load_scenario(bundled_scenario_path(name))


# ---------------------------------------------------------------------------
# validation

def _box_at(entity: EntitySpec, frame: float) -> tuple[float, float, float, float]:
    x, y = entity.position_at(frame)
    w, h = CLASS_SIZE.get(entity.cls, DEFAULT_SIZE)
    s = float(perspective_scale(y))
    return x - w * s / 2, y - h * s / 2, x + w * s / 2, y + h * s / 2


def _max_speed(entity: EntitySpec, lo: int, hi: int) -> float:
    """Largest trajectory speed (px/frame) over waypoint legs touching [lo, hi]."""
    best = 0.0
    traj = entity.trajectory
    for (f0, x0, y0), (f1, x1, y1) in zip(traj, traj[1:]):
        if f1 <= lo or f0 >= hi:
            continue
        best = max(best, float(np.hypot(x1 - x0, y1 - y0)) / (f1 - f0))
    return best


def validate(scenario: Scenario) -> None:
    """Check every scenario invariant; raise ScenarioError naming the first violation."""
    _require(scenario.duration_frames > 0, "duration_frames", "must be > 0")
    _require(scenario.frame_rate > 0, "frame_rate", "must be > 0")
    _require(scenario.seed >= 0, "seed", "must be a non-negative integer")
    _require(len(scenario.cameras) > 0, "cameras", "at least one camera required")
    cam_ids = [c.camera_id for c in scenario.cameras]
    _require(len(set(cam_ids)) == len(cam_ids), "cameras", "camera_id values must be unique")

    seen: set[str] = set()
    for i, e in enumerate(scenario.entities):
        where = f"entities[{i}]"
        _require(e.entity_id not in seen, where, f"duplicate entity_id {e.entity_id!r}")
        seen.add(e.entity_id)
        _require(e.camera_id is not None, where, "camera_id required when the scenario has several cameras")
        _require(e.camera_id in cam_ids, where, f"unknown camera_id {e.camera_id!r}")
        _require(len(e.trajectory) > 0, f"{where}.trajectory", "at least one waypoint required")
        frames = [w[0] for w in e.trajectory]
        _require(all(a < b for a, b in zip(frames, frames[1:])), f"{where}.trajectory", "waypoints must be sorted by frame_index")
        for j, (f, x, y) in enumerate(e.trajectory):
            w = f"{where}.trajectory[{j}]"
            _require(f >= 0, w, "frame_index must be >= 0")
            _require(0 <= x <= FRAME_W and 0 <= y <= FRAME_H, w, f"position ({x}, {y}) outside the {FRAME_W}x{FRAME_H} frame plane")
        for j, co in enumerate(e.carried_objects):
            _require(co.visible_from_frame <= co.visible_to_frame, f"{where}.carried_objects[{j}]", "visible_from_frame > visible_to_frame")
        prev_end = -1
        for j, seg in enumerate(e.behavior_segments):
            w = f"{where}.behavior_segments[{j}]"
            _require(seg.motion_profile in MOTION_PROFILES, w, f"unknown motion_profile {seg.motion_profile!r}")
            _require(seg.from_frame <= seg.to_frame, w, "from_frame > to_frame")
            _require(seg.from_frame > prev_end, w, "behavior segments overlap")
            prev_end = seg.to_frame
            if seg.motion_profile == "idle":
                _require(_max_speed(e, seg.from_frame, seg.to_frame) <= MAX_SPEED_IDLE, w,
                         f"idle segment needs trajectory speed <= {MAX_SPEED_IDLE} px/frame")
            elif seg.motion_profile in ("fall", "fight"):
                _require(_max_speed(e, seg.from_frame, seg.to_frame) <= MAX_SPEED_ANOMALOUS, w,
                         f"{seg.motion_profile} segment needs trajectory speed <= {MAX_SPEED_ANOMALOUS} px/frame")
                margin = 2 * PROFILE_STEP[seg.motion_profile]
                lo, hi = max(seg.from_frame, e.first_frame), min(seg.to_frame, e.last_frame)
                probes = [lo, hi] + [f for f in frames if lo < f < hi]
                for f in probes:
                    x0, y0, x1, y1 = _box_at(e, f)
                    _require(x0 - margin >= 0 and y0 - margin >= 0 and x1 + margin <= FRAME_W and y1 + margin <= FRAME_H,
                             w, f"body leaves the frame plane during {seg.motion_profile} at frame {f}")

    ids: set[str] = set()
    for i, inj in enumerate(scenario.injections):
        where = f"injections[{i}]"
        _require(inj.injection_id not in ids, where, f"duplicate injection_id {inj.injection_id!r}")
        ids.add(inj.injection_id)
        _require(inj.camera_id in cam_ids, where, f"references unknown camera {inj.camera_id!r}")
        _require(inj.kind in INJECTION_KINDS, where, f"kind must be one of {INJECTION_KINDS}")
        _require(0 <= inj.frame_index < scenario.duration_frames, where,
                 f"frame_index {inj.frame_index} outside [0, duration_frames={scenario.duration_frames})")
        _require(injection_evidence(scenario, inj) is not None, where,
                 f"no {inj.kind} evidence on camera {inj.camera_id!r} at frame {inj.frame_index}")


def injection_evidence(scenario: Scenario, inj: InjectionSpec) -> EntitySpec | None:
    """The entity realizing an injection at its frame, if any."""
    f = inj.frame_index
    for e in scenario.entities_on(inj.camera_id, f, f + 1):
        if not e.active_at(f):
            continue
        if inj.kind == OBJECT_ANOMALY:
            if e.cls in SUSPICIOUS_CLASSES:
                return e
            if any(co.cls in SUSPICIOUS_CLASSES and co.visible_at(f) for co in e.carried_objects):
                return e
        elif e.cls == "person" and e.profile_at(f) in ANOMALOUS_PROFILES:
            return e
    return None


# ---------------------------------------------------------------------------
# frame generation

@dataclass(slots=True)
class EntityObservation:
    entity_id: str
    cls: str
    bbox: tuple[float, float, float, float]
    # (17, 3) array of x, y, confidence; persons only
    keypoints: np.ndarray | None
    identity: str

    def to_dict(self) -> dict:
        return {
            "entity_id": self.entity_id,
            "class": self.cls,
            "bbox": list(self.bbox),
            "keypoints": None if self.keypoints is None else self.keypoints.tolist(),
        }


@dataclass(slots=True)
class VisibleObject:
    cls: str
    bbox: tuple[float, float, float, float]
    owner_id: str

    def to_dict(self) -> dict:
        return {"class": self.cls, "bbox": list(self.bbox), "owner_id": self.owner_id}


@dataclass(slots=True)
class FrameDescriptor:
    camera_id: str
    frame_index: int
    capture_ts: float
    entities: list[EntityObservation] = field(default_factory=list)
    visible_objects: list[VisibleObject] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "camera_id": self.camera_id,
            "frame_index": self.frame_index,
            "capture_ts": self.capture_ts,
            "entities": [e.to_dict() for e in self.entities],
            "visible_objects": [o.to_dict() for o in self.visible_objects],
        }


def camera_phase(scenario: Scenario, camera_id: str) -> float:
    """Capture offset of a camera within one batch period, fixed by the seed."""
    period = BATCH_SIZE / scenario.frame_rate
    return (stable_hash(scenario.seed, camera_id, "phase") % 10_000) / 10_000 * period


def capture_time(scenario: Scenario, camera_id: str, frame_index: int, origin: float = 0.0) -> float:
    return origin + camera_phase(scenario, camera_id) + frame_index / scenario.frame_rate


def _clip_boxes(x0, y0, x1, y1):
    x0 = np.clip(x0, 0, FRAME_W)
    x1 = np.clip(x1, 0, FRAME_W)
    y0 = np.clip(y0, 0, FRAME_H)
    y1 = np.clip(y1, 0, FRAME_H)
    return x0, y0, x1 - x0, y1 - y0


@dataclass(frozen=True)
class _EntityStyle:
    directions: np.ndarray  # (17, 2) unit vectors
    confidence: np.ndarray  # (17,)


_STYLE_CACHE: dict[tuple[int, str], _EntityStyle] = {}


def _style(seed: int, entity_id: str) -> _EntityStyle:
    key = (seed, entity_id)
    style = _STYLE_CACHE.get(key)
    if style is None:
        rng = np.random.default_rng([seed, stable_hash(entity_id), 0x5EED])
        ang = rng.uniform(0, 2 * np.pi, NUM_KEYPOINTS)
        style = _EntityStyle(
            directions=np.stack([np.cos(ang), np.sin(ang)], axis=1),
            confidence=rng.uniform(0.6, 1.0, NUM_KEYPOINTS),
        )
        if len(_STYLE_CACHE) > 50_000:
            _STYLE_CACHE.clear()
        _STYLE_CACHE[key] = style
    return style


def _motion_offsets(entity: EntitySpec, frames: np.ndarray, style: _EntityStyle) -> np.ndarray:
    """Per-frame keypoint offsets (n, 17, 2) produced by the motion profiles."""
    out = np.zeros((len(frames), NUM_KEYPOINTS, 2))
    default = "walk" if entity.cls == "person" else "idle"
    covered = np.zeros(len(frames), dtype=bool)
    spans = [(s.from_frame, s.to_frame, s.motion_profile) for s in entity.behavior_segments]
    for lo, hi, profile in spans:
        mask = (frames >= lo) & (frames <= hi)
        covered |= mask
        if mask.any():
            out[mask] = _profile_offsets(profile, frames[mask] - lo, style)
    rest = ~covered
    if rest.any() and default != "idle":
        out[rest] = _profile_offsets(default, frames[rest], style)
    return out


def _profile_offsets(profile: str, phase_frames: np.ndarray, style: _EntityStyle) -> np.ndarray:
    step = PROFILE_STEP[profile]
    n = len(phase_frames)
    if step == 0.0:
        return np.zeros((n, NUM_KEYPOINTS, 2))
    tri = _TRIANGLE[phase_frames % 4] * step  # (n,)
    if profile == "walk":
        dirs = np.zeros((NUM_KEYPOINTS, 2))
        dirs[LIMB_KEYPOINTS, 0] = np.where(LIMB_KEYPOINTS % 2 == 0, 1.0, -1.0)
    elif profile == "fall":
        dirs = np.zeros((NUM_KEYPOINTS, 2))
        dirs[:, 1] = 1.0
    else:
        dirs = style.directions
    return tri[:, None, None] * dirs[None, :, :]


def generate_frames(
    scenario: Scenario, camera_id: str, start: int, stop: int, origin: float = 0.0
) -> list[FrameDescriptor]:
    """Frames ``[start, stop)`` of one camera, computed in a single vectorized pass."""
    if camera_id not in scenario.camera_ids:
        raise ScenarioError(f"unknown camera_id {camera_id!r}")
    if start < 0 or stop > scenario.duration_frames or start > stop:
        raise ScenarioError(f"frame range [{start}, {stop}) outside [0, {scenario.duration_frames})")
    phase = camera_phase(scenario, camera_id)
    fps = scenario.frame_rate
    out = [
        FrameDescriptor(camera_id, f, origin + phase + f / fps)
        for f in range(start, stop)
    ]
    for ent in scenario.entities_on(camera_id, start, stop):
        lo = max(start, ent.first_frame)
        hi = min(stop, ent.last_frame + 1)
        tr = _entity_track(scenario.seed, ent)
        a, b = lo - ent.first_frame, hi - ent.first_frame
        cx, cy, w, h = tr.cx[a:b], tr.cy[a:b], tr.w[a:b], tr.h[a:b]
        boxes = tr.boxes[a:b]
        kp_rows = tr.kps[a:b] if tr.kps is not None else [None] * len(boxes)
        carried = [co for co in ent.carried_objects if co.visible_to_frame >= lo and co.visible_from_frame < hi]
        ident = ent.person_identity
        eid, cls = ent.entity_id, ent.cls
        for k, box in enumerate(boxes):
            if box[2] <= 0 or box[3] <= 0:
                continue
            f = lo + k
            frame = out[f - start]
            frame.entities.append(EntityObservation(eid, cls, box, kp_rows[k], ident))
            for co in carried:
                if co.visible_at(f):
                    frame.visible_objects.append(
                        VisibleObject(co.cls, _carried_box(co.cls, float(cx[k]), float(cy[k]), float(w[k]), float(h[k])), ent.entity_id)
                    )
    return out


@dataclass
class _EntityTrack:
    cx: np.ndarray
    cy: np.ndarray
    w: np.ndarray
    h: np.ndarray
    boxes: list[tuple[float, float, float, float]]
    kps: list[np.ndarray] | None


_TRACK_CACHE: dict[int, tuple[EntitySpec, int, _EntityTrack]] = {}
_TRACK_CACHE_MAX = 1024


def _entity_track(seed: int, ent: EntitySpec) -> _EntityTrack:
    """Boxes and keypoints of an entity over its whole lifetime, computed once."""
    hit = _TRACK_CACHE.get(id(ent))
    if hit is not None and hit[0] is ent and hit[1] == seed:
        return hit[2]
    frames = np.arange(ent.first_frame, ent.last_frame + 1)
    wf = [p[0] for p in ent.trajectory]
    cx = np.interp(frames, wf, [p[1] for p in ent.trajectory])
    cy = np.interp(frames, wf, [p[2] for p in ent.trajectory])
    scale = perspective_scale(cy)
    w0, h0 = CLASS_SIZE.get(ent.cls, DEFAULT_SIZE)
    w, h = w0 * scale, h0 * scale
    bx, by, bw, bh = _clip_boxes(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    boxes = [tuple(r) for r in np.stack([bx, by, bw, bh], axis=1).tolist()]
    kps = None
    if ent.cls == "person":
        style = _style(seed, ent.entity_id)
        xy = np.empty((len(frames), NUM_KEYPOINTS, 2))
        xy[..., 0] = cx[:, None] + KEYPOINT_TEMPLATE[None, :, 0] * w[:, None]
        xy[..., 1] = cy[:, None] + KEYPOINT_TEMPLATE[None, :, 1] * h[:, None]
        xy += _motion_offsets(ent, frames, style)
        inside = (xy[..., 0] >= 0) & (xy[..., 0] <= FRAME_W) & (xy[..., 1] >= 0) & (xy[..., 1] <= FRAME_H)
        arr = np.empty((len(frames), NUM_KEYPOINTS, 3))
        arr[..., 0] = np.clip(xy[..., 0], 0, FRAME_W)
        arr[..., 1] = np.clip(xy[..., 1], 0, FRAME_H)
        arr[..., 2] = np.where(inside, style.confidence[None, :], 0.0)
        arr.flags.writeable = False
        kps = list(arr)
    track = _EntityTrack(cx, cy, w, h, boxes, kps)
    if len(_TRACK_CACHE) >= _TRACK_CACHE_MAX:
        for k in list(_TRACK_CACHE)[: _TRACK_CACHE_MAX // 2]:
            del _TRACK_CACHE[k]
    _TRACK_CACHE[id(ent)] = (ent, seed, track)
    return track


def _carried_box(cls: str, cx: float, cy: float, w: float, h: float) -> tuple[float, float, float, float]:
    ow, oh = CLASS_SIZE.get(cls, DEFAULT_SIZE)
    s = h / CLASS_SIZE["person"][1]
    ow, oh = ow * s, oh * s
    if cls == "backpack":
        ox, oy = cx + 0.25 * w, cy - 0.1 * h
    else:
        ox, oy = cx + 0.3 * w, cy + 0.05 * h
    bx, by, bw, bh = _clip_boxes(ox - ow / 2, oy - oh / 2, ox + ow / 2, oy + oh / 2)
    return (float(bx), float(by), float(bw), float(bh))


def generate_frame(scenario: Scenario, camera_id: str, frame_index: int, clock: Any = None) -> FrameDescriptor:
    """One frame; ``clock`` supplies the capture-time origin (0 when omitted)."""
    if not 0 <= frame_index < scenario.duration_frames:
        raise ScenarioError(f"frame_index {frame_index} out of range [0, {scenario.duration_frames})")
    origin = 0.0 if clock is None else clock.origin
    return generate_frames(scenario, camera_id, frame_index, frame_index + 1, origin)[0]


def mean_keypoint_displacement(a: np.ndarray, b: np.ndarray) -> float:
    """Mean Euclidean distance between matching keypoints of two skeletons."""
    return float(np.mean(np.hypot(b[:, 0] - a[:, 0], b[:, 1] - a[:, 1])))


def injection_schedule(scenario: Scenario, origin: float = 0.0) -> list[InjectionSpec]:
    """Injections with ground_truth_ts resolved to their frame's capture time, sorted by it."""
    out = [
        InjectionSpec(
            inj.injection_id, inj.camera_id, inj.kind, inj.frame_index,
            capture_time(scenario, inj.camera_id, inj.frame_index, origin),
        )
        for inj in scenario.injections
    ]
    out.sort(key=lambda i: (i.ground_truth_ts, i.injection_id))
    return out


def iter_camera_frames(scenario: Scenario, camera_id: str, chunk: int = BATCH_SIZE, origin: float = 0.0) -> Iterable[FrameDescriptor]:
    for start in range(0, scenario.duration_frames, chunk):
        yield from generate_frames(scenario, camera_id, start, min(start + chunk, scenario.duration_frames), origin)
