"""Inference time budgets, in integer nanoseconds throughout."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from fractions import Fraction

from .errors import Infeasible, StrideExceedsWindow

NS_PER_S = 1_000_000_000


def _rate(rate_hz) -> Fraction:
    r = Fraction(str(rate_hz)) if isinstance(rate_hz, float) else Fraction(rate_hz)
    if r <= 0:
        raise ValueError("rate must be > 0")
    return r


@dataclass(frozen=True)
class WindowPlan:
    """Receptive field ``L`` and stride ``s`` (both in samples) at a fixed input rate."""

    receptive_field: int
    stride: int
    input_rate_hz: Fraction | int | float | str

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_rate_hz", _rate(self.input_rate_hz))
        if not self.receptive_field >= self.stride >= 1:
            raise StrideExceedsWindow(f"need L >= s >= 1, got L={self.receptive_field} s={self.stride}")

    @property
    def budget_per_inference_ns(self) -> int:
        return round(Fraction(self.stride * NS_PER_S) / self.input_rate_hz)

    @property
    def prediction_rate_hz(self) -> Fraction:
        return self.input_rate_hz / self.stride


def scale_stride(plan: WindowPlan, k: int) -> WindowPlan:
    """Stride times ``k``: k-times the budget, 1/k the prediction rate."""
    if int(k) != k or k < 1:
        raise ValueError("k must be a positive integer")
    if plan.stride * k > plan.receptive_field:
        raise StrideExceedsWindow(
            f"stride {plan.stride}*{k} exceeds receptive field {plan.receptive_field}"
        )
    return replace(plan, stride=plan.stride * int(k))


@dataclass(frozen=True)
class BudgetChain:
    horizon_ns: int
    sensing_delay_ns: int
    transmit_delay_ns: int

    @property
    def remaining_ns(self) -> int:
        return self.horizon_ns - self.sensing_delay_ns - self.transmit_delay_ns

    @property
    def feasible(self) -> bool:
        return self.remaining_ns > 0

    def rows(self) -> list[tuple[str, int]]:
        return [
            ("horizon", self.horizon_ns),
            ("sensing_delay", self.sensing_delay_ns),
            ("transmit_delay", self.transmit_delay_ns),
            ("remaining", self.remaining_ns),
        ]


def compute_budget(horizon_ns: int, sensing_delay_ns: int, transmit_delay_ns: int) -> int:
    if min(horizon_ns, sensing_delay_ns, transmit_delay_ns) < 0:
        raise ValueError("budget terms must be >= 0")
    chain = BudgetChain(horizon_ns, sensing_delay_ns, transmit_delay_ns)
    if not chain.feasible:
        raise Infeasible(f"remaining budget {chain.remaining_ns} ns <= 0")
    return chain.remaining_ns


class Feasibility(enum.Enum):
    REALTIME = "realtime"
    OVER_BUDGET = "over-budget"
    HORIZON_VIOLATING = "horizon-violating"


def classify_feasibility(plan: WindowPlan, measured_latency_ns: int, chain: BudgetChain) -> Feasibility:
    """Horizon first (a late answer is useless), then the per-inference budget."""
    if measured_latency_ns > chain.remaining_ns:
        return Feasibility.HORIZON_VIOLATING
    if measured_latency_ns > plan.budget_per_inference_ns:
        return Feasibility.OVER_BUDGET
    return Feasibility.REALTIME
