"""Delay / linear-warmup / constant schedule for the gradient reversal weight."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping

STANDARD_DELAYS = (0, 1000, 2000, 3000, 4000, 5000, 6000)
STANDARD_WARMUPS = (1000, 2000, 3000, 4000)
ACCELERATED_DELAYS = (500, 1000, 1500, 2000, 2500, 3000, 3500)
ACCELERATED_WARMUPS = (500, 1000, 2000, 4000)

REFERENCE_ITERATIONS = 16000


@dataclass(frozen=True)
class ScheduleParams:
    mu: int = 0
    w: int = 1
    c: float = 0.0

    def __post_init__(self):
        if int(self.mu) != self.mu or self.mu < 0:
            raise ValueError(f"mu must be a non-negative integer, got {self.mu}")
        if int(self.w) != self.w or self.w < 1:
            raise ValueError(f"w must be a positive integer, got {self.w}")
        if not self.c >= 0:
            raise ValueError(f"c must be >= 0, got {self.c}")

    @property
    def is_static(self) -> bool:
        return self.mu == 0 and self.w == 1

    def to_dict(self) -> dict[str, Any]:
        if self.is_static:
            return {"static": self.c}
        return {"mu": self.mu, "w": self.w, "c": self.c}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScheduleParams":
        keys = set(d)
        if keys == {"static"}:
            return static_schedule(float(d["static"]))
        if keys == {"mu", "w", "c"}:
            return cls(int(d["mu"]), int(d["w"]), float(d["c"]))
        raise ValueError(f"schedule must be {{'static': c}} or {{'mu', 'w', 'c'}}, got keys {sorted(keys)}")


def lambda_grl_at(t: int, s: ScheduleParams) -> float:
    """GRL weight at iteration ``t``: 0 through the delay, linear ramp, then ``c``."""
    if t < 0:
        raise ValueError(f"iteration must be >= 0, got {t}")
    if t <= s.mu:
        return 0.0
    if t <= s.mu + s.w:
        return s.c * (t - s.mu) / s.w
    return float(s.c)


def static_schedule(c: float) -> ScheduleParams:
    """Constant weight ``c`` from iteration 1 on (iterations are counted from 1)."""
    return ScheduleParams(mu=0, w=1, c=float(c))


def grid(standard: bool = True, c: float = 1.0, scale: float = 1.0) -> list[ScheduleParams]:
    """All (mu, w) combinations, mu ascending then w ascending.

    ``scale`` shrinks the grid for shorter runs; see :func:`rescale`.
    """
    delays, warmups = (
        (STANDARD_DELAYS, STANDARD_WARMUPS) if standard else (ACCELERATED_DELAYS, ACCELERATED_WARMUPS)
    )
    return [
        ScheduleParams(rescale(mu, scale), max(1, rescale(w, scale)), c)
        for mu in delays
        for w in warmups
    ]


def rescale(iterations: int, scale: float) -> int:
    """Scale an iteration count, rounding to the nearest 50 (exact when scale == 1)."""
    if scale == 1.0:
        return int(iterations)
    return int(math.floor(iterations * scale / 50.0 + 0.5)) * 50


def desk_scale(total_iterations: int) -> float:
    return total_iterations / REFERENCE_ITERATIONS
