"""Process-wide diagnostic counters.

Silent-but-counted events (dropped out-of-range points, clamped depths,
skipped optimizer steps) land here so tests and training logs can inspect
them without plumbing extra return values everywhere.
"""

from __future__ import annotations

from collections import Counter


class Diagnostics:
    def __init__(self):
        self._counts = Counter()

    def add(self, name: str, n: int = 1) -> None:
        if n:
            self._counts[name] += int(n)

    def get(self, name: str) -> int:
        return self._counts.get(name, 0)

    def reset(self) -> None:
        self._counts.clear()

    def snapshot(self) -> dict:
        return dict(self._counts)


counters = Diagnostics()
