"""Clocks for stage timing. Anything timed accepts a zero-argument clock callable."""

from __future__ import annotations

import time
from typing import Callable

Clock = Callable[[], float]

default_clock: Clock = time.perf_counter


class VirtualClock:
    """Deterministic clock that advances by ``tick`` seconds per reading."""

    def __init__(self, tick: float = 0.001, start: float = 0.0) -> None:
        self.tick = tick
        self.now = start

    def __call__(self) -> float:
        self.now += self.tick
        return self.now
