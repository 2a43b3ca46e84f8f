"""Mergeable (count, sum, sum of squares) triples for parallel reductions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class Moments:
    count: int = 0
    total: float = 0.0
    sumsq: float = 0.0

    @classmethod
    def of(cls, values: Iterable[float]) -> "Moments":
        arr = np.asarray(list(values), dtype=float)
        return cls(int(arr.size), float(arr.sum()), float(np.sum(arr * arr)))

    def merge(self, other: "Moments") -> "Moments":
        return Moments(self.count + other.count, self.total + other.total, self.sumsq + other.sumsq)

    __add__ = merge

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else float("nan")

    @property
    def variance(self) -> float:
        """Unbiased sample variance."""
        if self.count < 2:
            return 0.0
        v = (self.sumsq - self.total * self.total / self.count) / (self.count - 1)
        return max(v, 0.0)

    @property
    def standard_error(self) -> float:
        return float(np.sqrt(self.variance / self.count)) if self.count > 1 else 0.0


def reduce_ordered(parts: list[Moments]) -> Moments:
    """Left fold in the given order, so results do not depend on scheduling."""
    out = Moments()
    for p in parts:
        out = out.merge(p)
    return out
