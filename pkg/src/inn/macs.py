"""Multiply-accumulate instrumentation for the complexity probe.

Kernels report their MAC counts here when counting is switched on. Counts are
bucketed by a category label so the probe can separate the attention mixing
term (quadratic in the neuron count) from everything else (linear).
"""

from __future__ import annotations

from contextlib import contextmanager


class MacCounter:
    """Global MAC tally, off by default so the hot path stays branch-cheap."""

    def __init__(self):
        self.enabled = False
        self.category = "other"
        self.counts: dict[str, int] = {}

    def reset(self):
        self.counts = {}

    def add(self, n: int):
        self.counts[self.category] = self.counts.get(self.category, 0) + int(n)

    def total(self) -> int:
        return sum(self.counts.values())

    @contextmanager
    def count(self):
        self.enabled = True
        try:
            yield self
        finally:
            self.enabled = False

    @contextmanager
    def label(self, category: str):
        prev = self.category
        self.category = category
        try:
            yield
        finally:
            self.category = prev


counter = MacCounter()
