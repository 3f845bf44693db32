"""Interval feature caching for iterative samplers."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable


@dataclass
class CacheState:
    """Stored feature plus recompute/reuse bookkeeping for one sampling run."""

    interval: int = 1
    feature: Any = None
    last_refresh_t: int | None = None
    recomputes: int = 0
    reuses: int = 0

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError(f"cache interval must be >= 1, got {self.interval}")

    @property
    def steps_served(self) -> int:
        return self.recomputes + self.reuses

    def serve(self, t: int, compute: Callable[[], Any]):
        return serve(t, compute, self)

    def to_dict(self) -> dict:
        return {
            "interval": self.interval,
            "recomputes": self.recomputes,
            "reuses": self.reuses,
            "speedup": speedup_estimate(self) if self.steps_served else None,
        }


def serve(t: int, compute: Callable[[], Any], state: CacheState):
    """Return the feature for step ``t``, recomputing iff ``t % N == 0`` or the cache is empty."""
    if state.feature is None or t % state.interval == 0:
        state.feature = compute()
        state.last_refresh_t = t
        state.recomputes += 1
    else:
        state.reuses += 1
    return state.feature


def speedup_estimate(state: CacheState, compute_cost: float = 1.0, reuse_cost: float = 0.0) -> float:
    """Speedup from avoided denoiser evaluations.

    Uncached cost is ``steps * compute_cost``; cached cost charges
    ``compute_cost`` per recompute and ``reuse_cost`` per reuse. The default
    unit-cost model reduces to ``steps / recomputes``.
    """
    if state.steps_served < 1:
        raise ValueError("no steps served yet")
    cached = state.recomputes * compute_cost + state.reuses * reuse_cost
    return state.steps_served * compute_cost / cached
