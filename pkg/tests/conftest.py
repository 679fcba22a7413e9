from __future__ import annotations

import asyncio
import sys

import numpy as np
import pytest

from svs.batch import Batch, EnrichedBatch
from svs.clock import VIRTUAL, run
from svs.scenario import (
    BATCH_SIZE,
    BehaviorSegment,
    CameraSpec,
    CarriedObject,
    EntitySpec,
    InjectionSpec,
    Scenario,
    generate_frames,
    load_bundled,
)


def person(eid: str, cam: str, start: int, stop: int, x0: float, x1: float, y: float = 400.0, **kw) -> EntitySpec:
    return EntitySpec(eid, "person", ((start, x0, y), (stop, x1, y)), camera_id=cam, **kw)


def simple_scenario(duration: int = 300, cameras: int = 1, entities: tuple[EntitySpec, ...] = (), injections=(), seed: int = 1) -> Scenario:
    cams = tuple(CameraSpec(f"cam{i}", reporting=(i == 0)) for i in range(cameras))
    return Scenario(cams, tuple(entities), tuple(injections), duration, 30.0, seed)


def backpack_scenario(duration: int = 300) -> Scenario:
    carrier = person(
        "p1", "cam0", 0, duration - 1, 300.0, 400.0,
        carried_objects=(CarriedObject("backpack", 60, 120),),
    )
    inj = InjectionSpec("inj-obj", "cam0", "ObjectAnomaly", 60)
    return simple_scenario(duration, entities=(carrier,), injections=(inj,))


def fall_scenario(duration: int = 300) -> Scenario:
    p = EntitySpec(
        "p1", "person", ((0, 400.0, 400.0), (duration - 1, 420.0, 400.0)), camera_id="cam0",
        behavior_segments=(BehaviorSegment(100, 130, "fall"),),
    )
    inj = InjectionSpec("inj-beh", "cam0", "BehavioralAnomaly", 100)
    return simple_scenario(duration, entities=(p,), injections=(inj,))


def batch_of(scenario: Scenario, cam: str = "cam0", k: int = 0) -> Batch:
    return Batch(cam, k, generate_frames(scenario, cam, BATCH_SIZE * k, BATCH_SIZE * (k + 1)))


def enriched_of(scenario: Scenario, cam: str = "cam0", k: int = 0) -> EnrichedBatch:
    b = batch_of(scenario, cam, k)
    return EnrichedBatch(b, [[] for _ in b.frames])


def run_virtual(coro_fn):
    """Run ``coro_fn(clock)`` on a fresh virtual-time loop."""
    return run(coro_fn, VIRTUAL)


@pytest.fixture(scope="session")
def campus():
    return load_bundled("campus-8cam")


@pytest.fixture(scope="session")
def smoke():
    return load_bundled("smoke-1cam")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def loop():
    lp = asyncio.new_event_loop()
    yield lp
    lp.close()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
