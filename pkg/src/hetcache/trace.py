"""Per-step trace records and run reports."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class Regime(str, enum.Enum):
    FULL = "full"
    PARTIAL = "partial"
    REUSE = "reuse"


@dataclass(frozen=True)
class StepTrace:
    step: int
    timestep: int
    regime: Regime
    d_t: float | None  # None on the first step (no previous modulated input)
    d_before: float  # accumulated drift used for the regime decision
    active_tokens: int
    attention_cost: int  # (active tokens)^2, one head of one block
    model_calls: int

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "timestep": self.timestep,
            "regime": self.regime.value,
            "d_t": _finite_or_str(self.d_t),
            "d_before": _finite_or_str(self.d_before),
            "active_tokens": self.active_tokens,
            "attention_cost": self.attention_cost,
            "model_calls": self.model_calls,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "StepTrace":
        return cls(
            step=raw["step"],
            timestep=raw["timestep"],
            regime=Regime(raw["regime"]),
            d_t=None if raw["d_t"] is None else float(raw["d_t"]),
            d_before=float(raw["d_before"]),
            active_tokens=raw["active_tokens"],
            attention_cost=raw["attention_cost"],
            model_calls=raw["model_calls"],
        )


def _finite_or_str(value):
    # JSON has no infinity; keep it as the string "inf"
    if value is None:
        return None
    if value == float("inf"):
        return "inf"
    return value


@dataclass
class RunReport:
    config: dict
    steps: list[StepTrace] = field(default_factory=list)
    wall_time_s: float = 0.0
    failed_step: int | None = None
    divergence: dict | None = None  # filled in by a comparison against a baseline

    def histogram(self) -> dict[str, int]:
        counts = {r.value: 0 for r in Regime}
        for s in self.steps:
            counts[s.regime.value] += 1
        return counts

    @property
    def model_calls(self) -> int:
        return sum(s.model_calls for s in self.steps)
