import math

import pytest

from augserve.core import ApiCallSpec, CostModel, MemoryState, RequestSpec, Segment, Strategy
from augserve.scheduler import Job, Policy, Scheduler, SchedulerConfig
from augserve.workload import true_predictions, worked_example_trace

UNIT = CostModel.units(swap_latency=0)


def make(policy="fcfs", budget=6, **kw):
    cfg = SchedulerConfig(policy=policy, memory_budget=budget, **kw)
    return Scheduler(cfg, UNIT), MemoryState(budget)


def jobs_for(trace, sched, mem):
    jobs = []
    for seq, spec in enumerate(trace):
        job = Job(spec, seq, true_predictions(spec))
        sched.decide(job, mem)
        jobs.append(job)
    return jobs


def simple(rid, pre, duration=1.0, final=1, strategy=None):
    return RequestSpec(rid, 0, 0, (Segment(pre, ApiCallSpec(duration=duration), strategy),), final)


@pytest.mark.parametrize("policy, order", [
    ("fcfs", ["R1", "R2", "R3"]),
    ("sjf", ["R2", "R3", "R1"]),
    ("sjf-total", ["R3", "R1", "R2"]),
    ("lamps", ["R3", "R2", "R1"]),
])
def test_worked_example_ranking(policy, order):
    sched, mem = make(policy)
    ranked = sched.rank_waiting(jobs_for(worked_example_trace(), sched, mem))
    assert [j.id for j in ranked] == order


def test_single_entry_rank():
    sched, mem = make("lamps")
    jobs = jobs_for(worked_example_trace()[:1], sched, mem)
    assert sched.rank_waiting(jobs) == jobs


def test_ties_break_by_arrival_then_trace_order():
    sched, mem = make("sjf")
    trace = [simple("b", 3), simple("a", 3)]
    assert [j.id for j in sched.rank_waiting(jobs_for(trace, sched, mem))] == ["b", "a"]


def test_admission_capacity_arithmetic():
    sched, mem = make("fcfs", max_batch_size=8)
    jobs = jobs_for([simple("big", 5), simple("small", 2)], sched, mem)
    batch, deferred = sched.form_batch(jobs, mem)
    assert [j.id for j in batch] == ["big"]
    assert [j.id for j in deferred] == ["small"]


def test_empty_queue_gives_empty_batch():
    sched, mem = make()
    assert sched.form_batch([], mem) == ([], [])


def test_pre_api_part_fits_beside_preserved_context():
    sched, mem = make("fcfs", max_batch_size=8)
    mem.set_resident("R1", 5)  # R1 preserved across its API
    r1, r2, r3 = worked_example_trace()
    jobs = jobs_for([r2, r3], sched, mem)
    batch, deferred = sched.form_batch(jobs, mem)
    assert [j.id for j in batch] == ["R2"]
    assert [j.id for j in deferred] == ["R3"]


def test_max_batch_size_limit():
    sched, mem = make("fcfs", budget=100, max_batch_size=2)
    jobs = jobs_for([simple(f"r{i}", 1) for i in range(4)], sched, mem)
    batch, deferred = sched.form_batch(jobs, mem)
    assert len(batch) == 2 and len(deferred) == 2


def test_starvation_threshold_boundary():
    sched, mem = make(starvation_threshold=100)
    a, b = jobs_for([simple("a", 1), simple("b", 1)], sched, mem)
    a.starvation_cnt, b.starvation_cnt = 100, 99
    sched.mark_starving([a, b])
    assert a.starving and a.starvation_cnt == 0
    assert not b.starving and b.starvation_cnt == 99


def test_simultaneous_starvation_keeps_relative_order():
    sched, mem = make("sjf", budget=100, starvation_threshold=100)
    jobs = jobs_for([simple("x", 1), simple("long1", 50), simple("y", 2), simple("long2", 40)], sched, mem)
    by_id = {j.id: j for j in jobs}
    by_id["long1"].starvation_cnt = by_id["long2"].starvation_cnt = 100
    sched.mark_starving(jobs)
    ranked = sched.rank_waiting(jobs)
    # both starving at the head, in their policy order (long2 is shorter)
    assert [j.id for j in ranked] == ["long2", "long1", "x", "y"]


def test_disabled_threshold():
    assert SchedulerConfig(starvation_threshold=None).starvation_threshold == math.inf
    with pytest.raises(ValueError):
        SchedulerConfig(starvation_threshold=0)


def test_deferral_counting():
    sched, mem = make("fcfs", max_batch_size=1)
    jobs = jobs_for([simple("a", 1), simple("b", 1)], sched, mem)
    for _ in range(3):
        sched.form_batch(jobs, mem)
    assert [j.starvation_cnt for j in jobs] == [0, 3]


@pytest.mark.parametrize("strategy, held_after", [
    (Strategy.PRESERVE, 5),
    (Strategy.DISCARD, 0),
    (Strategy.SWAP, 5),  # freed only when the swap-out completes
])
def test_api_encounter_memory(strategy, held_after):
    sched, mem = make()
    (job,) = jobs_for([simple("a", 5, duration=2.0, strategy=strategy)], sched, mem)
    job.context, job.seg_emitted, job.started = 5, 5, True
    mem.set_resident("a", 5)
    finish, swap_done = sched.on_api_encounter(job, 5, mem, link_free=0)
    assert mem.held("a") == held_after
    assert "a" in sched.api_queues[strategy]
    if strategy is Strategy.SWAP:
        assert swap_done == 5 and finish == 7  # swap_latency=0
    else:
        assert swap_done is None and finish == 7


def test_swap_out_serialised_on_link():
    sched = Scheduler(SchedulerConfig(memory_budget=10), CostModel.units(swap_latency=1))
    mem = MemoryState(10)
    (job,) = jobs_for([simple("a", 2, duration=1.0, strategy=Strategy.SWAP)], sched, mem)
    job.context = 2
    finish, done = sched.on_api_encounter(job, 4, mem, link_free=6)
    assert done == 7 and finish == 8


def test_preserve_return_is_immediately_decodable():
    sched, mem = make()
    spec = RequestSpec("a", 0, 0, (Segment(5, ApiCallSpec(duration=2.0, response_len=3), Strategy.PRESERVE),), 2)
    (job,) = jobs_for([spec], sched, mem)
    job.context, job.seg_emitted, job.started = 5, 5, True
    sched.on_api_encounter(job, 5, mem, 0)
    sched.on_api_return(job, 7)
    assert job.restore is None
    assert job.context + job.pending_response == 8
    assert job.seg == 1 and job.seg_emitted == 0


def test_swapped_request_waits_for_memory():
    sched, mem = make("fcfs", max_batch_size=4)
    spec = simple("a", 2, strategy=Strategy.SWAP)
    (job,) = jobs_for([spec], sched, mem)
    job.context, job.seg_emitted, job.started = 2, 2, True
    mem.set_resident("a", 2)
    sched.on_api_encounter(job, 2, mem, 0)
    mem.swap_out("a")
    sched.on_api_return(job, 3)
    assert job.restore is Strategy.SWAP
    mem.set_resident("other", 5)
    batch, deferred = sched.form_batch([job], mem)
    assert batch == [] and deferred == [job]
    mem.release("other")
    batch, _ = sched.form_batch([job], mem)
    assert batch == [job]


def test_policy_parsing():
    assert SchedulerConfig(policy="sjf-total").policy is Policy.SJF_TOTAL
    with pytest.raises(ValueError):
        SchedulerConfig(policy="lifo")
