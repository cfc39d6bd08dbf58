from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmstream.errors import Infeasible, StrideExceedsWindow
from mmstream.sched import BudgetChain, Feasibility, WindowPlan, classify_feasibility, compute_budget, scale_stride

MS = 1_000_000


def test_compute_budget_examples():
    assert compute_budget(290 * MS, 45 * MS, 3 * MS) == 242 * MS
    assert compute_budget(123, 0, 0) == 123
    with pytest.raises(Infeasible):
        compute_budget(100, 80, 30)


def test_scale_stride_60hz_k4():
    plan = WindowPlan(8, 1, 60)
    assert plan.budget_per_inference_ns == 16_666_667
    scaled = scale_stride(plan, 4)
    assert scaled.stride == 4
    assert scaled.budget_per_inference_ns == 66_666_667
    assert abs(scaled.budget_per_inference_ns - 4 * plan.budget_per_inference_ns) <= 1
    assert scaled.prediction_rate_hz == Fraction(15)


def test_scale_stride_identity_and_limits():
    plan = WindowPlan(8, 2, 100)
    assert scale_stride(plan, 1) == plan
    with pytest.raises(StrideExceedsWindow):
        scale_stride(WindowPlan(8, 4, 60), 3)
    with pytest.raises(StrideExceedsWindow):
        WindowPlan(2, 3, 60)
    with pytest.raises(ValueError):
        scale_stride(plan, 0)


def test_classify_examples():
    chain = BudgetChain(290 * MS, 45 * MS, 3 * MS)
    plan = WindowPlan(1, 1, 60)
    assert classify_feasibility(plan, 4 * MS, chain) is Feasibility.REALTIME
    assert classify_feasibility(plan, 20 * MS, chain) is Feasibility.OVER_BUDGET
    assert classify_feasibility(WindowPlan(1, 1, 10), 10 * MS, BudgetChain(10 * MS, 5 * MS, 0)) \
        is Feasibility.HORIZON_VIOLATING


def test_budget_chain_rows():
    rows = dict(BudgetChain(290 * MS, 45 * MS, 3 * MS).rows())
    assert rows["remaining"] == 242 * MS


terms = st.integers(0, 10**9)


@given(st.integers(0, 10**10), terms, terms)
def test_budget_order_independent_and_linear(h, a, b):
    if h - a - b <= 0:
        with pytest.raises(Infeasible):
            compute_budget(h, a, b)
        return
    assert compute_budget(h, a, b) == compute_budget(h, b, a) == h - a - b
    assert compute_budget(h + 7, a, b) == compute_budget(h, a, b) + 7


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.sampled_from([30, 60, 100, 2000, "29.97"]))
def test_scale_composes(s, a, b, rate):
    plan = WindowPlan(s * a * b, s, rate)
    assert scale_stride(scale_stride(plan, a), b) == scale_stride(plan, a * b)


@given(st.integers(1, 16), st.integers(0, 300 * MS), st.sampled_from([30, 60, 100, 200]))
def test_larger_stride_never_loses_realtime(k, latency, rate):
    chain = BudgetChain(290 * MS, 45 * MS, 3 * MS)
    plan = WindowPlan(16, 1, rate)
    before = classify_feasibility(plan, latency, chain)
    after = classify_feasibility(scale_stride(plan, k), latency, chain)
    if before is Feasibility.REALTIME:
        assert after is Feasibility.REALTIME
