"""Batch containers shared by the pipeline and its stage transforms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from svs.scenario import BATCH_SIZE, FrameDescriptor


@dataclass(slots=True)
class Detection:
    camera_id: str
    frame_index: int
    cls: str
    bbox: tuple[float, float, float, float]
    confidence: float
    local_track_id: int | None = None
    keypoints: np.ndarray | None = None
    feature: np.ndarray | None = None
    # evaluation-only ground truth; never persisted
    gt_entity_id: str | None = None
    gt_identity: str | None = None


@dataclass
class Batch:
    camera_id: str
    batch_index: int
    frames: list[FrameDescriptor]

    def __post_init__(self) -> None:
        if len(self.frames) != BATCH_SIZE:
            raise ValueError(f"a batch holds exactly {BATCH_SIZE} frames, got {len(self.frames)}")

    @property
    def capture_ts_first(self) -> float:
        return self.frames[0].capture_ts

    @property
    def capture_ts_last(self) -> float:
        return self.frames[-1].capture_ts

    @property
    def first_frame(self) -> int:
        return self.frames[0].frame_index


@dataclass
class WindowScore:
    camera_id: str
    window_index: int
    window_span: tuple[int, int]
    person_scores: dict[int, float]
    frame_scene_scores: dict[int, float]

    @property
    def scene_score(self) -> float:
        return max(self.frame_scene_scores.values(), default=0.0)

    def to_dict(self) -> dict:
        return {
            "camera_id": self.camera_id,
            "window_index": self.window_index,
            "window_span": list(self.window_span),
            "person_scores": {str(k): v for k, v in sorted(self.person_scores.items())},
            "frame_scene_scores": {str(k): v for k, v in sorted(self.frame_scene_scores.items())},
        }


@dataclass
class EnrichedBatch:
    batch: Batch
    # one list per frame of the batch, same order as batch.frames
    detections: list[list[Detection]] = field(default_factory=list)
    stage_ts: dict[str, float] = field(default_factory=dict)
    window_scores: list[WindowScore] = field(default_factory=list)
    frame_scene_scores: dict[int, float] = field(default_factory=dict)
    crops: dict[int, int] = field(default_factory=dict)
    # person detections, fixed once detection has run
    person_count: int | None = None

    @property
    def camera_id(self) -> str:
        return self.batch.camera_id

    @property
    def batch_index(self) -> int:
        return self.batch.batch_index

    @property
    def frames(self) -> list[FrameDescriptor]:
        return self.batch.frames

    def all_detections(self):
        for dets in self.detections:
            yield from dets

    def person_detections(self) -> int:
        if self.person_count is not None:
            return self.person_count
        return sum(1 for d in self.all_detections() if d.cls == "person")
