"""Scoped wall-clock timers for phase breakdowns (kernel, walk, fft, other).

Pure observation: accumulating a phase has no effect on simulation state.
"""

import time
from contextlib import contextmanager


class Timers:
    def __init__(self):
        self.totals = {}
        self._stack = []

    @contextmanager
    def phase(self, name):
        start = time.perf_counter()
        self._stack.append(name)
        try:
            yield
        finally:
            self._stack.pop()
            elapsed = time.perf_counter() - start
            self.totals[name] = self.totals.get(name, 0.0) + elapsed

    def snapshot(self):
        return dict(self.totals)

    def reset(self):
        self.totals.clear()


class _NullTimers(Timers):
    @contextmanager
    def phase(self, name):
        yield


def null_timers():
    return _NullTimers()
