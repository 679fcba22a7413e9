"""Procedural construction of multi-camera scenes.

Pedestrians arrive at each camera as a Poisson process whose rate swells
and ebbs over a few minutes, walk across the view at a steady pace and
leave. Injection actors are added on top: a passer-by whose backpack comes
into view for an object anomaly, or a passer-by who falls for a behavioural
one. Everything is drawn from one seeded generator, so the same arguments
always produce the same scene.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from svs.scenario import (
    BEHAVIORAL_ANOMALY,
    FRAME_H,
    FRAME_W,
    OBJECT_ANOMALY,
    BehaviorSegment,
    CameraSpec,
    CarriedObject,
    EntitySpec,
    InjectionSpec,
    Scenario,
    validate,
)


@dataclass(frozen=True)
class CrowdProfile:
    arrivals_per_s: float
    stay_s: tuple[float, float]
    # relative amplitude and period of the slow swell in arrival rate
    swell: float = 0.6
    swell_period_s: float = 240.0
    idle_share: float = 0.0
    vehicles: int = 0


PROFILES = {
    "hallway": CrowdProfile(0.045, (20.0, 45.0)),
    "parking": CrowdProfile(0.03, (25.0, 55.0), vehicles=3),
    "entrance": CrowdProfile(0.06, (15.0, 30.0)),
    "vending": CrowdProfile(0.025, (30.0, 80.0), idle_share=0.5),
}

WALK_SPEED_MAX = 0.7
Y_BAND = (260.0, 560.0)


def _walker(rng, eid: str, cam: str, start: int, stay_frames: int, identity: str | None) -> EntitySpec:
    y0 = float(rng.uniform(*Y_BAND))
    y1 = float(np.clip(y0 + rng.uniform(-60, 60), *Y_BAND))
    speed = float(rng.uniform(0.35, WALK_SPEED_MAX))
    dist = min(FRAME_W - 80.0, speed * stay_frames)
    x0 = float(rng.uniform(40.0, FRAME_W - 40.0 - dist))
    if rng.random() < 0.5:
        xa, xb = x0, x0 + dist
    else:
        xa, xb = x0 + dist, x0
    return EntitySpec(eid, "person", ((start, xa, y0), (start + stay_frames, xb, y1)), camera_id=cam, identity=identity)


def _idler(rng, eid: str, cam: str, start: int, stay_frames: int, identity: str | None) -> EntitySpec:
    x = float(rng.uniform(200.0, FRAME_W - 200.0))
    y = float(rng.uniform(*Y_BAND))
    # walk in, stand still, walk out
    walk = min(stay_frames // 4, 300)
    xa = x - 0.5 * walk
    xb = x + 0.5 * walk
    traj = ((start, xa, y), (start + walk, x, y), (start + stay_frames - walk, x, y), (start + stay_frames, xb, y))
    seg = (BehaviorSegment(start + walk, start + stay_frames - walk, "idle"),)
    return EntitySpec(eid, "person", traj, behavior_segments=seg, camera_id=cam, identity=identity)


def crowd(
    rng: np.random.Generator,
    camera_id: str,
    profile: CrowdProfile,
    duration_frames: int,
    frame_rate: float,
    identity_pool: list[str],
    reuse_share: float = 0.25,
    prefix: str = "",
) -> list[EntitySpec]:
    out: list[EntitySpec] = []
    phase = rng.uniform(0, 2 * np.pi)
    peak = profile.arrivals_per_s * (1 + profile.swell)
    t = 0.0
    duration_s = duration_frames / frame_rate
    n = 0
    # thinning of a homogeneous process at the peak rate
    while True:
        t += rng.exponential(1.0 / peak)
        if t >= duration_s:
            break
        rate = profile.arrivals_per_s * (1 + profile.swell * np.sin(2 * np.pi * t / profile.swell_period_s + phase))
        if rng.random() * peak > rate:
            continue
        stay = float(rng.uniform(*profile.stay_s))
        start = int(t * frame_rate)
        stay_frames = min(int(stay * frame_rate), duration_frames - 1 - start)
        if stay_frames < 2 * frame_rate:
            continue
        if identity_pool and rng.random() < reuse_share:
            identity = identity_pool[int(rng.integers(len(identity_pool)))]
        else:
            identity = f"{prefix}person-{camera_id}-{n}"
            identity_pool.append(identity)
        eid = f"{camera_id}/p{n}"
        n += 1
        if rng.random() < profile.idle_share:
            out.append(_idler(rng, eid, camera_id, start, stay_frames, identity))
        else:
            out.append(_walker(rng, eid, camera_id, start, stay_frames, identity))
    for v in range(profile.vehicles):
        x = float(rng.uniform(150, FRAME_W - 150))
        y = float(rng.uniform(450, 620))
        out.append(EntitySpec(f"{camera_id}/v{v}", "vehicle", ((0, x, y), (duration_frames - 1, x, y)), camera_id=camera_id))
    return out


def object_actor(camera_id: str, n: int, frame: int, frame_rate: float, rng, visible_s: float = 2.0) -> EntitySpec:
    """A passer-by whose backpack becomes visible exactly at ``frame``."""
    lead = int(3 * frame_rate)
    stay = int(8 * frame_rate)
    y = float(rng.uniform(330, 500))
    x0 = float(rng.uniform(150, 350))
    start = frame - lead
    traj = ((start, x0, y), (start + stay, x0 + 0.6 * stay, y))
    carried = (CarriedObject("backpack", frame, frame + int(visible_s * frame_rate) - 1),)
    return EntitySpec(f"{camera_id}/obj{n}", "person", traj, carried_objects=carried, camera_id=camera_id,
                      identity=f"actor-obj-{camera_id}-{n}")


def fall_actor(camera_id: str, n: int, frame: int, frame_rate: float, rng, fall_s: float = 3.0) -> EntitySpec:
    """A passer-by who walks in, falls at ``frame`` and lies still afterwards."""
    lead = int(3 * frame_rate)
    fall = int(fall_s * frame_rate)
    rest = int(2 * frame_rate)
    y = float(rng.uniform(330, 460))
    x0 = float(rng.uniform(250, 450))
    start = frame - lead
    x1 = x0 + 0.5 * lead
    traj = ((start, x0, y), (frame, x1, y), (frame + fall + rest, x1, y))
    segs = (BehaviorSegment(frame, frame + fall - 1, "fall"), BehaviorSegment(frame + fall, frame + fall + rest, "idle"))
    return EntitySpec(f"{camera_id}/fall{n}", "person", traj, behavior_segments=segs, camera_id=camera_id,
                      identity=f"actor-fall-{camera_id}-{n}")


def build_scenario(
    cameras: list[tuple[str, str, bool]],
    duration_frames: int,
    seed: int,
    injections_per_kind: int = 0,
    first_injection_s: float = 205.0,
    injection_spacing_s: float = 15.0,
    frame_rate: float = 30.0,
    profiles: dict[str, CrowdProfile] | None = None,
) -> Scenario:
    """Build a scene; ``cameras`` holds (camera_id, location kind, reporting).

    Injections alternate object/behavioural on the first reporting camera,
    ``injection_spacing_s`` apart, starting at ``first_injection_s``.
    """
    profiles = PROFILES if profiles is None else profiles
    rng = np.random.default_rng(seed)
    specs = tuple(CameraSpec(cid, kind, rep) for cid, kind, rep in cameras)
    entities: list[EntitySpec] = []
    pool: list[str] = []
    for cid, kind, _ in cameras:
        entities.extend(crowd(rng, cid, profiles[kind], duration_frames, frame_rate, pool))

    injections: list[InjectionSpec] = []
    reporters = [c for c in specs if c.reporting]
    if injections_per_kind and reporters:
        cam = reporters[0].camera_id
        for i in range(2 * injections_per_kind):
            frame = int(round((first_injection_s + i * injection_spacing_s) * frame_rate))
            n = i // 2
            if i % 2 == 0:
                entities.append(object_actor(cam, n, frame, frame_rate, rng))
                injections.append(InjectionSpec(f"obj-{n:02d}", cam, OBJECT_ANOMALY, frame))
            else:
                entities.append(fall_actor(cam, n, frame, frame_rate, rng))
                injections.append(InjectionSpec(f"beh-{n:02d}", cam, BEHAVIORAL_ANOMALY, frame))
    sc = Scenario(specs, tuple(entities), tuple(injections), duration_frames, frame_rate, seed)
    validate(sc)
    return sc


CAMPUS_CAMERAS = [
    ("hallway-1", "hallway", True),
    ("parking-1", "parking", False),
    ("hallway-2", "hallway", False),
    ("parking-2", "parking", False),
    ("hallway-3", "hallway", False),
    ("entrance-1", "entrance", False),
    ("entrance-2", "entrance", False),
    ("vending-1", "vending", False),
]


def campus_8cam(seed: int = 7) -> Scenario:
    return build_scenario(CAMPUS_CAMERAS, 36_000, seed, injections_per_kind=30)


def smoke_1cam(seed: int = 3) -> Scenario:
    return build_scenario([("hallway-1", "hallway", True)], 1_800, seed, injections_per_kind=1,
                          first_injection_s=20.0, injection_spacing_s=15.0)


__all__ = ["CrowdProfile", "PROFILES", "build_scenario", "campus_8cam", "smoke_1cam", "crowd", "object_actor", "fall_actor"]
