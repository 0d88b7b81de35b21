"""Simulated time in integer milliseconds. Nothing reads the wall clock."""

import threading


class SimClock:
    def __init__(self, start_ms: int = 0):
        self._now = int(start_ms)
        self._lock = threading.Lock()

    @property
    def now_ms(self) -> int:
        return self._now

    def advance(self, ms: int) -> int:
        if ms < 0:
            raise ValueError("time only moves forward")
        with self._lock:
            self._now += int(ms)
            return self._now


def seconds_to_ms(seconds: float) -> int:
    return int(round(seconds * 1000))
