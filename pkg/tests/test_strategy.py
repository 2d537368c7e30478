import pytest

from augserve.core import ApiCallSpec, ApiType, CostModel, DomainError, RequestSpec, Segment, Strategy
from augserve.strategy import (
    BatchContextEstimate,
    Prediction,
    choose_strategy,
    estimate_batch_context,
    memory_time_score,
    segment_for_next_api,
)
from augserve.workload import generate_synthetic, load_class_config, true_predictions, worked_example_trace

UNIT = CostModel.units(swap_latency=0)


def test_tiny_api_prefers_preserve():
    pred = Prediction(pre_api_len=50, api_duration=9e-5, api_response_len=4, total_remaining_len=80)
    d = choose_strategy(pred, 100, estimate_batch_context(150, 4096), CostModel())
    assert d.strategy is Strategy.PRESERVE
    assert d.waste_preserve == min(d.wastes.values())


def test_zero_duration_ties_go_to_preserve():
    pred = Prediction(0, 0.0, 0, 0)
    d = choose_strategy(pred, 0, BatchContextEstimate(0, 0), CostModel())
    assert d.wastes == {s: 0 for s in Strategy}
    assert d.strategy is Strategy.PRESERVE


def test_long_api_small_context_prefers_discard():
    pred = Prediction(pre_api_len=10, api_duration=28.6, api_response_len=64, total_remaining_len=50)
    d = choose_strategy(pred, 20, BatchContextEstimate(c_other=3000, c_batch=3030), CostModel())
    assert d.strategy is Strategy.DISCARD
    assert d.waste_discard < d.waste_swap < d.waste_preserve


def test_forced_strategy_still_reports_wastes():
    pred = Prediction(5, 2, 0, 6)
    d = choose_strategy(pred, 0, BatchContextEstimate(1, 6), UNIT, forced=Strategy.SWAP)
    assert d.strategy is Strategy.SWAP and d.forced
    assert d.waste_preserve == 10


def test_estimate_batch_context():
    assert estimate_batch_context(100, 4096) == BatchContextEstimate(3996, 4096)
    assert estimate_batch_context(100, None, resident_others=250) == BatchContextEstimate(250, 350)
    with pytest.raises(DomainError):
        BatchContextEstimate(c_other=5, c_batch=2)


def test_score_without_api_is_arithmetic_series():
    req = RequestSpec("a", 0, 0, (), 3)
    pred = Prediction(3, 0, 0, 3)
    assert memory_time_score(req, pred, None, CostModel.units()) == 6


def _example_scores():
    out = {}
    for req in worked_example_trace():
        pred = true_predictions(req)[0]
        est = estimate_batch_context(pred.pre_api_len, 6)
        d = choose_strategy(pred, 0, est, UNIT, forced=req.segments[0].strategy)
        out[req.id] = memory_time_score(req, pred, d, UNIT)
    return out


def test_worked_example_score_order():
    s = _example_scores()
    assert s["R3"] < s["R2"] < s["R1"]
    # R1: ramp 1..5 (15) + 5 held over 2 units (10) + final token at 6 (6)
    assert s["R1"] == 31


def test_discard_scores_below_preserve_for_long_api():
    req = RequestSpec("a", 0, 0, (Segment(2, ApiCallSpec(ApiType.CHATBOT, 30.0, 0)),), 2)
    pred = true_predictions(req)[0]
    est = BatchContextEstimate(0, 2)
    keep = choose_strategy(pred, 0, est, UNIT, forced=Strategy.PRESERVE)
    drop = choose_strategy(pred, 0, est, UNIT, forced=Strategy.DISCARD)
    assert memory_time_score(req, pred, drop, UNIT) < memory_time_score(req, pred, keep, UNIT)


def test_segment_for_next_api():
    a1 = ApiCallSpec(ApiType.QA, 1.0, 3)
    a2 = ApiCallSpec(ApiType.MATH, 0.5, 1)
    req = RequestSpec("a", 0, 4, (Segment(7, a1), Segment(2, a2)), 9)
    assert segment_for_next_api(req, 0) == (7, a1)
    assert segment_for_next_api(req, 1) == (2, a2)
    assert segment_for_next_api(req, 2) == (9, None)
    with pytest.raises(DomainError):
        segment_for_next_api(req, 3)


def test_segments_in_declaration_order_on_synthetic_trace():
    trace = generate_synthetic(load_class_config("infercept"), 50, 1.0, seed=4, max_apis=5)
    multi = [r for r in trace if len(r.segments) > 1]
    assert multi
    for req in multi:
        for k, seg in enumerate(req.segments):
            assert segment_for_next_api(req, k) == (seg.decode_len, seg.api)
