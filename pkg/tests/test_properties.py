from hypothesis import given, settings
from hypothesis import strategies as st

from _gen import POLICIES, traces
from augserve.core import CostModel, Strategy, ramp_area, waste_discard, waste_preserve, waste_swap
from augserve.engine import EngineConfig, run
from augserve.metrics import aggregate
from augserve.scheduler import SchedulerConfig
from augserve.strategy import BatchContextEstimate, Prediction, choose_strategy

nonneg = st.floats(0, 1e4, allow_nan=False)
cm_st = st.sampled_from([CostModel(), CostModel.units(), CostModel.units(recompute_rate=3, swap_latency=2)])


@given(t=nonneg, c=st.integers(0, 10_000), other=st.integers(0, 10_000), m=st.floats(0.1, 4), cm=cm_st)
def test_wastes_nonnegative(t, c, other, m, cm):
    assert waste_preserve(t, c, m) >= 0
    assert waste_discard(c, other, m, cm) >= 0
    assert waste_swap(c, c + other, m, cm) >= 0


@given(t1=nonneg, t2=nonneg, c=st.integers(1, 5000))
def test_preserve_waste_monotone_in_duration(t1, t2, c):
    lo, hi = sorted((t1, t2))
    assert waste_preserve(lo, c, 1) <= waste_preserve(hi, c, 1)


@given(c=st.integers(0, 2000), n1=st.integers(0, 500), n2=st.integers(0, 500), cm=cm_st)
def test_ramp_area_grows_with_length(c, n1, n2, cm):
    lo, hi = sorted((n1, n2))
    assert ramp_area(c, lo, cm) <= ramp_area(c, hi, cm)


@given(pre=nonneg, dur=nonneg, ctx=st.integers(0, 5000), other=st.integers(0, 5000), cm=cm_st)
def test_choice_is_a_minimum(pre, dur, ctx, other, cm):
    d = choose_strategy(Prediction(pre, dur, 0, pre), ctx, BatchContextEstimate(other, other + ctx + pre), cm)
    assert d.wastes[d.strategy] == min(d.wastes.values())


@settings(max_examples=150, deadline=None)
@given(trace=traces(), policy=st.sampled_from(POLICIES), budget=st.integers(12, 40))
def test_timelines_ordered_and_complete(trace, policy, budget):
    cfg = EngineConfig(cost=CostModel.units(), scheduler=SchedulerConfig(policy=policy, memory_budget=budget))
    res = run(trace, cfg)
    assert len(res.timelines) + len(res.rejected) == len(trace)
    for t in res.timelines:
        assert t.arrival <= t.first_token <= t.completion


@settings(max_examples=100, deadline=None)
@given(trace=traces(), h1=st.floats(0.5, 60), h2=st.floats(0.5, 60))
def test_completed_count_nonincreasing_as_horizon_shrinks(trace, h1, h2):
    # completions per unit time can rise on a shorter window; the count cannot
    short, long = sorted((h1, h2))
    counts = []
    for h in (long, short):
        cfg = EngineConfig(cost=CostModel.units(), scheduler=SchedulerConfig(memory_budget=40), horizon=h)
        res = run(trace, cfg)
        counts.append(aggregate(res.timelines, h)["completed"])
        assert all(t.completion <= h for t in res.timelines)
    assert counts[1] <= counts[0]
