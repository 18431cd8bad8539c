"""A minimal deterministic discrete-event loop in virtual microseconds."""

from __future__ import annotations

import heapq
import itertools
from typing import Callable


class EventLoop:
    def __init__(self):
        self.now = 0.0
        self._queue: list = []
        self._seq = itertools.count()

    def at(self, when: float, action: Callable[[], None]) -> None:
        if when < self.now:
            raise ValueError(f"cannot schedule in the past ({when} < {self.now})")
        heapq.heappush(self._queue, (when, next(self._seq), action))

    def after(self, delay: float, action: Callable[[], None]) -> None:
        self.at(self.now + delay, action)

    def run(self) -> float:
        while self._queue:
            self.now, _, action = heapq.heappop(self._queue)
            action()
        return self.now

    def __len__(self) -> int:
        return len(self._queue)
