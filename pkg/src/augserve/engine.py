"""Deterministic discrete-event engine for iteration-level serving."""

from __future__ import annotations

import enum
import heapq
import json
import math
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from .core import CostModel, MemoryState, RequestSpec, Strategy, decode_step_time, t_fwd, t_swap
from .scheduler import Job, Scheduler, SchedulerConfig, StepKind
from .strategy import HandlingDecision, Prediction
from .workload import Oracle, PredictorKind, predict, true_predictions


class EventKind(enum.IntEnum):
    """Heap events; the integer value is the tie-break order at equal times."""

    ARRIVAL = 0
    ITERATION_COMPLETE = 1
    API_FINISH = 2
    SWAP_OUT_DONE = 3
    SWAP_IN_DONE = 4
    RECOMPUTE_DONE = 5


@dataclass(frozen=True)
class EngineConfig:
    cost: CostModel = field(default_factory=CostModel)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    predictor: PredictorKind = field(default_factory=Oracle)
    seed: int = 0
    horizon: float = math.inf

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")


@dataclass
class RequestTimeline:
    id: str
    arrival: float
    first_token: float
    completion: float
    tokens_emitted: int
    strategy_history: list[HandlingDecision] = field(default_factory=list)

    @property
    def e2e(self):
        return self.completion - self.arrival

    @property
    def ttft(self):
        return self.first_token - self.arrival


@dataclass
class RunResult:
    timelines: list[RequestTimeline]
    rejected: list[dict]
    unfinished: list[str]
    events: list[dict]
    end_time: float
    iterations: int
    peak_memory: float


class StallError(RuntimeError):
    """No event is pending yet ready requests cannot be scheduled."""


class Engine:
    """One simulation run. Instances are single-threaded and single-use."""

    def __init__(self, trace: list[RequestSpec], cfg: EngineConfig, event_sink: IO[str] | None = None):
        self.cfg = cfg
        self.cm = cfg.cost
        self.sched = Scheduler(cfg.scheduler, cfg.cost)
        self.mem = MemoryState(cfg.scheduler.memory_budget, cfg.cost.mem_per_token)
        self.rng = np.random.default_rng(cfg.seed)
        self.trace = trace
        self.jobs: dict[str, Job] = {}
        self.ready: dict[str, Job] = {}
        self.heap: list[tuple] = []
        self._n = 0
        self.now = 0
        self.busy = False
        self.link_free = 0
        self.events: list[dict] = []
        self.sink = event_sink
        self.rejected: list[dict] = []
        self.iterations = 0
        self.peak = 0
        self._batch: list[tuple[Job, StepKind]] = []

    # -- event plumbing ---------------------------------------------------
    def _push(self, time, kind: EventKind, rid: str | None = None):
        self._n += 1
        heapq.heappush(self.heap, (time, int(kind), rid or "", self._n))

    def _log(self, kind: str, rid=None, **extra):
        rec = {"time": self.now, "kind": kind, "request": rid, "mem": self.mem.used, **extra}
        self.events.append(rec)
        if self.sink is not None:
            self.sink.write(json.dumps(rec) + "\n")
        self.mem.check()
        self.peak = max(self.peak, self.mem.used)

    # -- main loop --------------------------------------------------------
    def run(self) -> RunResult:
        ids = set()
        for seq, spec in enumerate(sorted(self.trace, key=lambda r: r.arrival_time)):
            if spec.id in ids:
                raise ValueError(f"duplicate request id {spec.id!r}")
            ids.add(spec.id)
            preds = [predict(self.cfg.predictor, p, self.rng) for p in true_predictions(spec)]
            self.jobs[spec.id] = Job(spec, seq, preds)
            self._push(spec.arrival_time, EventKind.ARRIVAL, spec.id)

        horizon = self.cfg.horizon
        while self.heap:
            time, kind, rid, _ = heapq.heappop(self.heap)
            if time > horizon:
                break
            self.now = time
            self._handle(EventKind(kind), rid)
            if self.heap and self.heap[0][0] == self.now:
                continue
            self._try_schedule()

        if not self.heap and not self.busy:
            stuck = [j.id for j in self.ready.values()]
            if stuck:
                raise StallError(f"t={self.now}: ready requests {stuck} can never be scheduled")

        timelines = [
            RequestTimeline(j.id, j.arrival, j.first_token, j.completion, j.tokens_emitted, j.strategy_history)
            for j in sorted(self.jobs.values(), key=lambda j: j.seq)
            if j.done
        ]
        rejected_ids = {r["id"] for r in self.rejected}
        unfinished = [j.id for j in self.jobs.values() if not j.done and j.id not in rejected_ids]
        return RunResult(timelines, self.rejected, unfinished, self.events, self.now, self.iterations, self.peak)

    def _handle(self, kind: EventKind, rid: str):
        if kind is EventKind.ARRIVAL:
            self._on_arrival(self.jobs[rid])
        elif kind is EventKind.ITERATION_COMPLETE:
            self._on_iteration_complete()
        elif kind is EventKind.API_FINISH:
            self._on_api_finish(self.jobs[rid])
        elif kind is EventKind.SWAP_OUT_DONE:
            # a zero-length API may already have returned (or finished) the request
            if rid in self.mem.resident and not self.jobs[rid].done:
                self.mem.swap_out(rid)
            self._log("SwapOutDone", rid)
        elif kind is EventKind.SWAP_IN_DONE:
            self._log("SwapInDone", rid)
        elif kind is EventKind.RECOMPUTE_DONE:
            self._log("RecomputeDone", rid)

    def _on_arrival(self, job: Job):
        spec = job.spec
        cap = self.sched.capacity_tokens
        reason = None
        if spec.peak_context > cap:
            reason = f"peak context {spec.peak_context} tokens exceeds memory budget ({cap:g} tokens)"
        elif spec.prompt_len + 1 > self.cfg.scheduler.max_batch_tokens:
            reason = f"prompt of {spec.prompt_len} tokens exceeds max_batch_tokens"
        if reason:
            self.rejected.append({"id": spec.id, "reason": reason})
            self._log("Reject", spec.id, reason=reason)
            return
        self.sched.decide(job, self.mem)
        self.ready[job.id] = job
        self._log("Arrival", job.id)

    def _on_api_finish(self, job: Job):
        self.sched.on_api_return(job, self.now)
        job.tokens_emitted += job.pending_response
        self._log("ApiFinish", job.id)
        if job.seg == len(job.spec.segments) and job.spec.final_decode_len == 0:
            # nothing left to generate: the appended response completes the request
            job.context += job.pending_response
            job.pending_response = 0
            self._complete(job)
            return
        self.sched.decide(job, self.mem)
        self.ready[job.id] = job

    def _complete(self, job: Job):
        job.done = True
        job.completion = self.now
        if job.first_token is None:
            job.first_token = self.now
        self.mem.release(job.id)
        self.mem.swapped.pop(job.id, None)
        self.ready.pop(job.id, None)
        self._log("Complete", job.id)

    # -- iterations -------------------------------------------------------
    def _try_schedule(self):
        if self.busy or not self.ready or self.now < self.link_free:
            return
        sched = self.sched
        jobs = list(self.ready.values())
        ranked = sched.rank_waiting(jobs)
        batch, deferred = sched.form_batch(ranked, self.mem)
        while not batch:
            victim = self._eviction_victim(ranked)
            if victim is None:
                return
            self._evict(victim)
            ranked = sched.rank_waiting(jobs)
            batch, deferred = sched.form_batch(ranked, self.mem)
        sched.mark_starving(deferred)
        sched.age_scores(jobs)
        self._start_iteration(batch)

    def _eviction_victim(self, ranked: list[Job]) -> Job | None:
        """Lowest-ranked ready request holding memory; it is discarded to break a memory deadlock.

        Only used when nothing can be admitted and no swap-out is still in
        flight to free memory.
        """
        if any(k == EventKind.SWAP_OUT_DONE for _, k, _, _ in self.heap):
            return None
        for job in reversed(ranked):
            if self.mem.held(job.id) > 0:
                return job
        return None

    def _evict(self, job: Job):
        self.mem.release(job.id)
        job.restore = Strategy.DISCARD
        job.score = None
        job.dirty = True
        self._log("Preempt", job.id)

    def _start_iteration(self, batch: list[Job]):
        cm = self.cm
        compute = []
        swap_total = 0
        plan = []
        for job in batch:
            kind = job.step_kind()
            end_ctx = job.end_context()
            if kind is StepKind.PREFILL:
                step = t_fwd(job.spec.prompt_len, cm) if not cm.unit_mode else cm.iter_time
                if not cm.unit_mode and end_ctx > job.spec.prompt_len:
                    step += decode_step_time(end_ctx, cm)
            elif kind is StepKind.RECOMPUTE:
                step = t_fwd(end_ctx, cm)
            else:
                step = decode_step_time(end_ctx, cm)
                if not cm.unit_mode and job.pending_response:
                    step += t_fwd(job.pending_response, cm)
                if kind is StepKind.SWAP_IN:
                    self.mem.swapped.pop(job.id, None)
                    sw = t_swap(job.context, cm)
                    swap_total += sw
                    self._push(self.now + swap_total, EventKind.SWAP_IN_DONE, job.id)
            compute.append(step)
            self.mem.set_resident(job.id, end_ctx)
            plan.append((job, kind))
        if cm.unit_mode:
            duration = max(compute) + swap_total
        else:
            duration = cm.iter_time + sum(compute) + swap_total
        self.iterations += 1
        self.busy = True
        self._batch = plan
        self._log("IterationStart", None, batch=[j.id for j in batch])
        for job, kind in plan:
            if kind is StepKind.RECOMPUTE:
                self._push(self.now + duration, EventKind.RECOMPUTE_DONE, job.id)
        self._push(self.now + duration, EventKind.ITERATION_COMPLETE)

    def _on_iteration_complete(self):
        self.busy = False
        plan, self._batch = self._batch, []
        finished, to_api = [], []
        for job, kind in plan:
            emits = job.emits_token()
            job.started = True
            job.restore = None
            job.context += job.pending_response
            job.pending_response = 0
            if emits:
                job.context += 1
                job.seg_emitted += 1
                job.tokens_emitted += 1
                if job.first_token is None:
                    job.first_token = self.now
            job.dirty = True
            if job.seg_remaining <= 0:
                (to_api if job.has_api else finished).append(job)
        self._log("IterationComplete", None, batch=[j.id for j, _ in plan])
        for job in finished:
            self._complete(job)
        for job in to_api:
            self._enter_api(job)

    def _enter_api(self, job: Job):
        self.ready.pop(job.id)
        finish, swap_done = self.sched.on_api_encounter(job, self.now, self.mem, self.link_free)
        self._log("ApiStart", job.id, strategy=job.decision.strategy.value)
        if swap_done is not None:
            self.link_free = swap_done
            self._push(swap_done, EventKind.SWAP_OUT_DONE, job.id)
        self._push(finish, EventKind.API_FINISH, job.id)


def run(trace: list[RequestSpec], cfg: EngineConfig, event_sink: IO[str] | None = None) -> RunResult:
    return Engine(trace, cfg, event_sink).run()


def worked_example_config(policy) -> EngineConfig:
    """Unit-time setup for the three-request example.

    Memory budget of 6 tokens, one request per iteration, recomputing one
    token per iteration, and swaps that cost no time.
    """
    return EngineConfig(
        cost=CostModel.units(recompute_rate=1, swap_latency=0),
        scheduler=SchedulerConfig(policy=policy, memory_budget=6, max_batch_size=1, max_batch_tokens=64),
    )
