"""Stage transforms of the local node.

Synthetic stand-ins for the vision models: detection with configurable miss
rate and box noise, greedy IoU tracking, pose lookup, a windowed
displacement scorer for behavioural anomalies, crop selection and
identity-anchored feature vectors. Each transform is a pure function of its
input batch and the camera's own state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from svs.batch import Detection, EnrichedBatch, WindowScore, Batch
from svs.scenario import (
    FRAME_H,
    FRAME_W,
    SUSPICIOUS_CLASSES,
    stable_hash,
)

WINDOW_SIZE = 30
WINDOW_STRIDE = 20
MIN_PRESENT_FRAMES = 10
FEATURE_DIM = 128
KEYPOINT_CONF_MIN = 0.3


@dataclass(frozen=True)
class AnalyticsConfig:
    p_detect: float = 0.95
    bbox_noise_px: float = 2.0
    # keypoints use the same uniform model with their own amplitude
    keypoint_noise_px: float = 0.2
    suspicious_classes: frozenset[str] = SUSPICIOUS_CLASSES
    tau_iou: float = 0.3
    max_age: int = 30
    v_ref: float = 2.0
    sigma_feat: float = 0.05

    @classmethod
    def from_dict(cls, d: dict) -> AnalyticsConfig:
        kw = dict(d)
        if "suspicious_classes" in kw:
            kw["suspicious_classes"] = frozenset(kw["suspicious_classes"])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "p_detect": self.p_detect,
            "bbox_noise_px": self.bbox_noise_px,
            "keypoint_noise_px": self.keypoint_noise_px,
            "suspicious_classes": sorted(self.suspicious_classes),
            "tau_iou": self.tau_iou,
            "max_age": self.max_age,
            "v_ref": self.v_ref,
            "sigma_feat": self.sigma_feat,
        }


def _rng(seed: int, camera_id: str, batch_index: int, stage: int) -> np.random.Generator:
    return np.random.default_rng([seed, stable_hash(camera_id), batch_index, stage])


# ---------------------------------------------------------------------------
# detection

def detect(batch: Batch, config: AnalyticsConfig = AnalyticsConfig(), seed: int = 0) -> EnrichedBatch:
    """Detect every ground-truth entity and visible object independently with p_detect."""
    items = []
    for k, frame in enumerate(batch.frames):
        for obs in frame.entities:
            items.append((k, obs.cls, obs.bbox, obs.entity_id, obs.identity))
        for obj in frame.visible_objects:
            items.append((k, obj.cls, obj.bbox, f"{obj.owner_id}/{obj.cls}", None))

    rng = _rng(seed, batch.camera_id, batch.batch_index, 1)
    n = len(items)
    hit = rng.random(n) < config.p_detect
    noise = rng.uniform(-config.bbox_noise_px, config.bbox_noise_px, (n, 4)) if n else np.zeros((0, 4))
    conf = rng.uniform(0.5, 1.0, n).tolist()

    detections: list[list[Detection]] = [[] for _ in batch.frames]
    if n == 0:
        return EnrichedBatch(batch=batch, detections=detections, person_count=0)
    if config.bbox_noise_px > 0:
        boxes, valid = _perturb_boxes(np.array([it[2] for it in items], dtype=float), noise)
        boxes = [tuple(b) for b in boxes.tolist()]
        keep = (hit & valid).tolist()
    else:
        boxes = [it[2] for it in items]
        keep = hit.tolist()
    frames = batch.frames
    cam = batch.camera_id
    persons = 0
    for i, (k, cls, _, gt_id, ident) in enumerate(items):
        if keep[i]:
            detections[k].append(
                Detection(cam, frames[k].frame_index, cls, boxes[i], conf[i], gt_entity_id=gt_id, gt_identity=ident)
            )
            persons += cls == "person"
    return EnrichedBatch(batch=batch, detections=detections, person_count=persons)


def _perturb_boxes(boxes: np.ndarray, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shift each box corner by uniform noise and clip to the frame plane."""
    x0 = np.clip(boxes[:, 0] + noise[:, 0], 0.0, FRAME_W)
    y0 = np.clip(boxes[:, 1] + noise[:, 1], 0.0, FRAME_H)
    x1 = np.clip(boxes[:, 0] + boxes[:, 2] + noise[:, 0] + noise[:, 2], 0.0, FRAME_W)
    y1 = np.clip(boxes[:, 1] + boxes[:, 3] + noise[:, 1] + noise[:, 3], 0.0, FRAME_H)
    out = np.stack([x0, y0, x1 - x0, y1 - y0], axis=1)
    return out, (x1 > x0) & (y1 > y0)


# ---------------------------------------------------------------------------
# tracking

def iou(a, b) -> float:
    """Intersection over union of two [x, y, w, h] boxes; 0 for zero-area boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        return 0.0
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


@dataclass
class Tracklet:
    local_id: int
    camera_id: str
    last_bbox: tuple[float, float, float, float]
    frames_since_match: int = 0
    history: list[tuple[int, tuple[float, float, float, float]]] = field(default_factory=list)


HISTORY_LIMIT = 90


@dataclass
class TrackerState:
    camera_id: str
    tracklets: list[Tracklet] = field(default_factory=list)
    next_id: int = 1


def track(
    enriched: EnrichedBatch,
    state: TrackerState,
    tau_iou: float = 0.3,
    max_age: int = 30,
) -> EnrichedBatch:
    """Assign local track ids to person detections, frame by frame, by greedy IoU."""
    if state.camera_id != enriched.camera_id:
        raise ValueError(f"tracker state of {state.camera_id!r} used for {enriched.camera_id!r}")
    for dets in enriched.detections:
        persons = [d for d in dets if d.cls == "person"]
        tracklets = state.tracklets
        if not persons:
            if tracklets:
                for trk in tracklets:
                    trk.frames_since_match += 1
                state.tracklets = [t for t in tracklets if t.frames_since_match <= max_age]
            continue
        pairs = []
        for ti, trk in enumerate(tracklets):
            ax, ay, aw, ah = trk.last_bbox
            ax1, ay1 = ax + aw, ay + ah
            area_a = aw * ah
            if area_a <= 0:
                continue
            for di, det in enumerate(persons):
                bx, by, bw, bh = det.bbox
                iw = min(ax1, bx + bw) - max(ax, bx)
                if iw <= 0:
                    continue
                ih = min(ay1, by + bh) - max(ay, by)
                if ih <= 0 or bw <= 0 or bh <= 0:
                    continue
                inter = iw * ih
                v = inter / (area_a + bw * bh - inter)
                if v > tau_iou:
                    pairs.append((-v, ti, di))
        used_t: set[int] = set()
        used_d: set[int] = set()
        if pairs:
            pairs.sort()
            for _, ti, di in pairs:
                if ti in used_t or di in used_d:
                    continue
                used_t.add(ti)
                used_d.add(di)
                trk = tracklets[ti]
                det = persons[di]
                det.local_track_id = trk.local_id
                trk.last_bbox = det.bbox
                trk.frames_since_match = 0
                trk.history.append((det.frame_index, det.bbox))
                if len(trk.history) > HISTORY_LIMIT:
                    del trk.history[: len(trk.history) - HISTORY_LIMIT]
        retire = False
        for ti, trk in enumerate(tracklets):
            if ti not in used_t:
                trk.frames_since_match += 1
                if trk.frames_since_match > max_age:
                    retire = True
        if retire:
            state.tracklets = tracklets = [t for t in tracklets if t.frames_since_match <= max_age]
        for di, det in enumerate(persons):
            if di in used_d:
                continue
            trk = Tracklet(state.next_id, state.camera_id, det.bbox, 0, [(det.frame_index, det.bbox)])
            state.next_id += 1
            det.local_track_id = trk.local_id
            tracklets.append(trk)
    return enriched


# ---------------------------------------------------------------------------
# pose

def extract_pose(enriched: EnrichedBatch, config: AnalyticsConfig = AnalyticsConfig(), seed: int = 0) -> EnrichedBatch:
    """Attach perturbed ground-truth skeletons to tracked person detections."""
    targets = []
    sources = []
    for k, dets in enumerate(enriched.detections):
        by_id = None
        for det in dets:
            if det.cls != "person" or det.local_track_id is None:
                continue
            if by_id is None:
                by_id = {o.entity_id: o for o in enriched.frames[k].entities}
            obs = by_id.get(det.gt_entity_id)
            if obs is None or obs.keypoints is None:
                continue
            targets.append(det)
            sources.append(obs.keypoints)
    if not targets:
        return enriched
    kps = np.array(sources)
    rng = _rng(seed, enriched.camera_id, enriched.batch_index, 3)
    amp = config.keypoint_noise_px
    noise = rng.uniform(-amp, amp, (len(targets), kps.shape[1], 2))
    if amp > 0:
        kps[..., :2] += noise
        np.clip(kps[..., 0], 0, FRAME_W, out=kps[..., 0])
        np.clip(kps[..., 1], 0, FRAME_H, out=kps[..., 1])
    for det, kp in zip(targets, kps):
        det.keypoints = kp
    return enriched


# ---------------------------------------------------------------------------
# windowed anomaly scoring

def window_span(window_index: int) -> tuple[int, int]:
    first = WINDOW_STRIDE * window_index
    return first, first + WINDOW_SIZE - 1


def window_count(total_frames: int) -> int:
    if total_frames < WINDOW_SIZE:
        return 0
    return (total_frames - WINDOW_SIZE) // WINDOW_STRIDE + 1


def windows_ending_in(first_frame: int, last_frame: int) -> list[int]:
    """Indices of windows whose last frame lies in [first_frame, last_frame]."""
    out = []
    i = max(0, -(-(first_frame - WINDOW_SIZE + 1) // WINDOW_STRIDE))
    while window_span(i)[1] <= last_frame:
        if window_span(i)[1] >= first_frame:
            out.append(i)
        i += 1
    return out


class WindowScorer:
    """Rolling per-camera pose buffer evaluated on 30-frame windows, stride 20.

    Accepts contiguous chunks of frames of any length; each window is scored
    once, as soon as its last frame has been pushed.
    """

    def __init__(self, camera_id: str, v_ref: float = 2.0):
        self.camera_id = camera_id
        self.v_ref = v_ref
        self.next_window = 0
        self.windows_evaluated = 0
        self.last_frame: int = -1
        self.last_scene_score = 0.0
        # frame -> {local_id: (17, 2) keypoint positions}
        self._poses: dict[int, dict[int, np.ndarray]] = {}
        self._latest_cover: dict[int, float] = {}

    def push_frames(self, frames: list[tuple[int, dict[int, np.ndarray]]]) -> list[WindowScore]:
        for f, poses in frames:
            if f != self.last_frame + 1:
                raise ValueError(f"pose buffer of {self.camera_id!r} expected frame {self.last_frame + 1}, got {f}")
            self._poses[f] = poses
            self.last_frame = f
        out = []
        while window_span(self.next_window)[1] <= self.last_frame:
            ws = self._evaluate(self.next_window)
            self.windows_evaluated += 1
            self.next_window += 1
            if ws is not None:
                out.append(ws)
        horizon = WINDOW_STRIDE * self.next_window
        for f in [f for f in self._poses if f < horizon]:
            del self._poses[f]
        return out

    def push(self, enriched: EnrichedBatch) -> list[WindowScore]:
        frames = []
        for frame, dets in zip(enriched.frames, enriched.detections):
            poses = {
                d.local_track_id: d.keypoints[:, :2]
                for d in dets
                if d.cls == "person" and d.local_track_id is not None and d.keypoints is not None
            }
            frames.append((frame.frame_index, poses))
        scores = self.push_frames(frames)
        enriched.window_scores = scores
        enriched.frame_scene_scores = self.scene_scores_for(f for f, _ in frames)
        return scores

    def scene_scores_for(self, frames) -> dict[int, float]:
        return {f: self._latest_cover.get(f, self.last_scene_score) for f in frames}

    def _evaluate(self, index: int) -> WindowScore | None:
        first, last = window_span(index)
        present: dict[int, list[int]] = {}
        for f in range(first, last + 1):
            for lid in self._poses.get(f, ()):
                present.setdefault(lid, []).append(f)
        if not present:
            return None
        scores: dict[int, float] = {}
        for lid, frames in present.items():
            if len(frames) < MIN_PRESENT_FRAMES:
                continue
            fr = np.asarray(frames)
            consecutive = np.diff(fr) == 1
            if not consecutive.any():
                continue
            arr = np.stack([self._poses[f][lid] for f in frames])
            step = arr[1:] - arr[:-1]
            per_frame = np.sqrt(step[..., 0] ** 2 + step[..., 1] ** 2).mean(axis=1)[consecutive]
            scores[lid] = min(1.0, float(per_frame.mean()) / self.v_ref)
        frame_scores = {}
        for f in range(first, last + 1):
            here = [scores[lid] for lid in self._poses.get(f, ()) if lid in scores]
            frame_scores[f] = max(here, default=0.0)
            self._latest_cover[f] = frame_scores[f]
        for f in [f for f in self._latest_cover if f < first]:
            del self._latest_cover[f]
        ws = WindowScore(self.camera_id, index, (first, last), scores, frame_scores)
        self.last_scene_score = ws.scene_score
        return ws


def score_windows(scorer: WindowScorer, enriched: EnrichedBatch) -> list[WindowScore]:
    return scorer.push(enriched)


# ---------------------------------------------------------------------------
# crop selection and features

def information(det: Detection) -> float:
    """Crop information metric: box area times the share of confident keypoints."""
    if det.keypoints is None:
        return 0.0
    conf = det.keypoints[:, 2]
    return det.bbox[2] * det.bbox[3] * int(np.count_nonzero(conf >= KEYPOINT_CONF_MIN)) / len(conf)


def select_crop(enriched: EnrichedBatch) -> dict[int, int]:
    """Per local track id, the frame maximizing the information metric (earliest on ties)."""
    cands = [d for d in enriched.all_detections() if d.cls == "person" and d.local_track_id is not None]
    if not cands:
        enriched.crops = {}
        return {}
    with_kp = [d.keypoints[:, 2] for d in cands if d.keypoints is not None]
    # integer counts keep equal information values exactly equal, so ties resolve by frame
    confident = iter((np.stack(with_kp) >= KEYPOINT_CONF_MIN).sum(axis=1).tolist() if with_kp else [])
    best: dict[int, tuple[float, int]] = {}
    for det in cands:
        score = det.bbox[2] * det.bbox[3] * next(confident) / len(det.keypoints) if det.keypoints is not None else 0.0
        cur = best.get(det.local_track_id)
        if cur is None or score > cur[0] or (score == cur[0] and det.frame_index < cur[1]):
            best[det.local_track_id] = (score, det.frame_index)
    crops = {lid: f for lid, (_, f) in sorted(best.items())}
    enriched.crops = crops
    return crops


_BASIS_CACHE: dict[str, np.ndarray] = {}


def identity_basis(identity: str) -> np.ndarray:
    v = _BASIS_CACHE.get(identity)
    if v is None:
        rng = np.random.default_rng([stable_hash(identity), 0xFEA7])
        v = rng.standard_normal(FEATURE_DIM)
        v /= np.linalg.norm(v)
        v.setflags(write=False)
        _BASIS_CACHE[identity] = v
    return v


def make_feature(identity: str, sigma: float, rng: np.random.Generator) -> np.ndarray:
    # sigma is the expected norm of the noise vector, split evenly over components
    noise = rng.standard_normal(FEATURE_DIM) * (sigma / np.sqrt(FEATURE_DIM))
    v = identity_basis(identity) + noise
    return v / np.linalg.norm(v)


def extract_features(
    enriched: EnrichedBatch,
    crops: dict[int, int] | None = None,
    sigma_feat: float = 0.05,
    seed: int = 0,
) -> EnrichedBatch:
    """Attach a unit feature vector to each crop-selected detection."""
    crops = enriched.crops if crops is None else crops
    rng = _rng(seed, enriched.camera_id, enriched.batch_index, 6)
    first = enriched.frames[0].frame_index
    for lid, f in sorted(crops.items()):
        for det in enriched.detections[f - first]:
            if det.local_track_id == lid and det.cls == "person":
                ident = det.gt_identity or det.gt_entity_id or f"{enriched.camera_id}:{lid}"
                det.feature = identity_basis(ident).copy() if sigma_feat == 0 else make_feature(ident, sigma_feat, rng)
                break
    return enriched


def featured_detections(enriched: EnrichedBatch) -> list[Detection]:
    return [d for d in enriched.all_detections() if d.feature is not None]


def suspicious_detections(enriched: EnrichedBatch, classes=SUSPICIOUS_CLASSES) -> list[Detection]:
    return [d for d in enriched.all_detections() if d.cls in classes]
