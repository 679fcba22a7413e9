"""Virtual and real clocks over asyncio.

Every component is written against asyncio and a :class:`Clock`. In virtual
mode the whole system runs on :class:`VirtualTimeLoop`, an event loop whose
``time()`` only moves when every task is blocked on a timer: the loop jumps
straight to the next deadline instead of sleeping. Runs are then fast,
single-threaded and bit-for-bit reproducible.
"""

from __future__ import annotations

import asyncio
import selectors
from typing import Any, Awaitable, Callable, TypeVar

T = TypeVar("T")

VIRTUAL = "virtual"
REAL = "real"


class VirtualClockDeadlock(RuntimeError):
    """All tasks are blocked and no timer is pending."""


class _VirtualSelector(selectors.BaseSelector):
    def __init__(self, loop: VirtualTimeLoop):
        self._loop = loop
        self._real = selectors.DefaultSelector()

    def register(self, fileobj, events, data=None):
        return self._real.register(fileobj, events, data)

    def unregister(self, fileobj):
        return self._real.unregister(fileobj)

    def modify(self, fileobj, events, data=None):
        return self._real.modify(fileobj, events, data)

    def get_key(self, fileobj):
        return self._real.get_key(fileobj)

    def get_map(self):
        return self._real.get_map()

    def close(self):
        self._real.close()

    def select(self, timeout=None):
        ready = self._real.select(0)
        if ready:
            return ready
        if timeout is None:
            raise VirtualClockDeadlock("no runnable task and no pending timer")
        if timeout > 0:
            self._loop._advance(timeout)
        return []


class VirtualTimeLoop(asyncio.SelectorEventLoop):
    def __init__(self) -> None:
        self._vnow = 0.0
        super().__init__(selector=_VirtualSelector(self))

    def time(self) -> float:
        return self._vnow

    def _advance(self, dt: float) -> None:
        self._vnow += dt


class Clock:
    """Monotonic time source bound to the running event loop.

    ``origin`` is the loop time at which the run started; capture timestamps
    and every recorded interval are expressed on the loop's timeline.
    """

    def __init__(self, mode: str = VIRTUAL, loop: asyncio.AbstractEventLoop | None = None):
        if mode not in (VIRTUAL, REAL):
            raise ValueError(f"unknown clock mode {mode!r}")
        self.mode = mode
        self._loop = loop
        self.origin = 0.0 if loop is None else loop.time()
        self._last = self.origin

    def bind(self, loop: asyncio.AbstractEventLoop) -> None:
        self._loop = loop
        self.origin = loop.time()
        self._last = self.origin

    @property
    def loop(self) -> asyncio.AbstractEventLoop:
        if self._loop is None:
            self._loop = asyncio.get_running_loop()
            self.origin = self._loop.time()
            self._last = self.origin
        return self._loop

    def now(self) -> float:
        t = self.loop.time()
        # guard against clock steps: timestamps never decrease
        if t < self._last:
            return self._last
        self._last = t
        return t

    async def sleep(self, seconds: float) -> None:
        if seconds > 0:
            await asyncio.sleep(seconds)
        else:
            await asyncio.sleep(0)

    async def sleep_until(self, when: float) -> None:
        await self.sleep(when - self.now())


def run(main: Callable[[Clock], Awaitable[T]], mode: str = VIRTUAL) -> T:
    """Run ``main(clock)`` to completion on a loop matching ``mode``."""
    loop: asyncio.AbstractEventLoop = VirtualTimeLoop() if mode == VIRTUAL else asyncio.new_event_loop()
    try:
        clock = Clock(mode, loop)
        return loop.run_until_complete(main(clock))
    finally:
        try:
            _cancel_pending(loop)
        finally:
            loop.close()


def _cancel_pending(loop: asyncio.AbstractEventLoop) -> None:
    pending = [t for t in asyncio.all_tasks(loop) if not t.done()]
    for t in pending:
        t.cancel()
    if pending:
        loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))


class DelayLine:
    """FIFO transport with a fixed per-item latency.

    Items put at time ``t`` come out at ``t + delay`` in insertion order,
    whatever the timer heap does with equal deadlines.
    """

    def __init__(self, clock: Clock, delay: float, sink: Callable[[Any], Awaitable[None]]):
        self.clock = clock
        self.delay = delay
        self.sink = sink
        self._queue: asyncio.Queue = asyncio.Queue()
        self._task: asyncio.Task | None = None

    def start(self) -> DelayLine:
        self._task = asyncio.ensure_future(self._pump())
        return self

    def put(self, item: Any, delay: float | None = None) -> None:
        due = self.clock.now() + (self.delay if delay is None else delay)
        self._queue.put_nowait((due, item))

    async def close(self) -> None:
        self._queue.put_nowait(None)
        if self._task is not None:
            await self._task

    async def _pump(self) -> None:
        while True:
            entry = await self._queue.get()
            if entry is None:
                return
            due, item = entry
            await self.clock.sleep_until(due)
            await self.sink(item)
