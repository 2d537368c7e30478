"""Iteration-level scheduler: ranking, batch formation, starvation prevention.

Every iteration the ready requests are re-ranked and the batch is rebuilt
from scratch. A ready request that is left out keeps its KV cache resident
and simply pauses.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

from .core import CostModel, MemoryState, RequestSpec, Strategy, t_fwd, t_swap
from .strategy import (
    HandlingDecision,
    Prediction,
    choose_strategy,
    estimate_batch_context,
    memory_time_score,
    restore_area,
)


class Policy(str, enum.Enum):
    FCFS = "fcfs"
    SJF = "sjf"
    SJF_TOTAL = "sjf-total"
    LAMPS = "lamps"


POLICY_ORDER = (Policy.FCFS, Policy.SJF, Policy.SJF_TOTAL, Policy.LAMPS)


@dataclass(frozen=True)
class SchedulerConfig:
    policy: Policy = Policy.LAMPS
    starvation_threshold: float = 100
    score_update_interval: int = 1
    max_batch_tokens: int = 8192
    max_batch_size: int = 64
    memory_budget: float = 4096

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy(self.policy))
        if self.starvation_threshold is None:
            object.__setattr__(self, "starvation_threshold", math.inf)
        if self.starvation_threshold < 1:
            raise ValueError("starvation_threshold must be >= 1")
        if self.score_update_interval < 1:
            raise ValueError("score_update_interval must be >= 1")
        if self.max_batch_size < 1 or self.max_batch_tokens < 1:
            raise ValueError("batch limits must be >= 1")
        if not self.memory_budget > 0:
            raise ValueError("memory_budget must be > 0")


class StepKind(str, enum.Enum):
    PREFILL = "prefill"
    DECODE = "decode"
    RECOMPUTE = "recompute"
    SWAP_IN = "swap_in"


@dataclass(eq=False)
class Job:
    """Runtime state of one request; doubles as its waiting-queue entry."""

    spec: RequestSpec
    seq: int
    preds: list[Prediction]
    context: int = 0
    seg: int = 0
    seg_emitted: int = 0
    started: bool = False
    restore: Strategy | None = None
    pending_response: int = 0
    decision: HandlingDecision | None = None
    prev_decision: HandlingDecision | None = None
    in_api: bool = False
    done: bool = False
    # queue-entry fields
    score: float | None = None
    score_age: int = 0
    dirty: bool = True
    starvation_cnt: int = 0
    starving: bool = False
    rank_key: tuple | None = None
    # timeline
    first_token: float | None = None
    completion: float | None = None
    tokens_emitted: int = 0
    strategy_history: list[HandlingDecision] = field(default_factory=list)

    def __post_init__(self):
        self.context = self.spec.prompt_len

    @property
    def id(self) -> str:
        return self.spec.id

    @property
    def arrival(self):
        return self.spec.arrival_time

    @property
    def has_api(self) -> bool:
        return self.seg < len(self.spec.segments)

    @property
    def seg_decode_len(self) -> int:
        if self.has_api:
            return self.spec.segments[self.seg].decode_len
        return self.spec.final_decode_len

    @property
    def seg_remaining(self) -> int:
        return self.seg_decode_len - self.seg_emitted

    @property
    def pred(self) -> Prediction:
        return self.preds[self.seg]

    def step_kind(self) -> StepKind:
        if not self.started:
            return StepKind.PREFILL
        if self.restore is Strategy.DISCARD:
            return StepKind.RECOMPUTE
        if self.restore is Strategy.SWAP:
            return StepKind.SWAP_IN
        return StepKind.DECODE

    def emits_token(self) -> bool:
        return self.step_kind() is not StepKind.RECOMPUTE and self.seg_remaining > 0

    def end_context(self) -> int:
        """Resident context once this job's next step finishes."""
        return self.context + self.pending_response + (1 if self.emits_token() else 0)

    def step_tokens(self) -> int:
        kind = self.step_kind()
        if kind is StepKind.PREFILL:
            return self.spec.prompt_len + 1
        if kind is StepKind.RECOMPUTE:
            return self.context + self.pending_response
        return 1 + self.pending_response

    def predicted_remaining(self) -> tuple[int, int]:
        """(decode tokens before the next API, all decode tokens left), as predicted."""
        p = self.pred
        pre = max(math.ceil(p.pre_api_len - self.seg_emitted), 0)
        total = max(math.ceil(p.total_remaining_len - self.seg_emitted), pre)
        return pre, total

    def need(self, capacity_tokens) -> int:
        """Tokens this job is expected to hold at the end of its current segment."""
        pre, _ = self.predicted_remaining()
        projected = self.context + self.pending_response + pre
        end = self.end_context()
        return max(end, min(projected, capacity_tokens))


class Scheduler:
    """Single-owner ranking and admission state machine driven by the engine."""

    def __init__(self, cfg: SchedulerConfig, cm: CostModel):
        self.cfg = cfg
        self.cm = cm
        self.capacity_tokens = cfg.memory_budget / cm.mem_per_token
        self.api_queues: dict[Strategy, dict[str, float]] = {s: {} for s in Strategy}

    # -- strategy ---------------------------------------------------------
    def decide(self, job: Job, mem: MemoryState) -> HandlingDecision | None:
        """Pick the handling strategy for the API that ends the job's current segment."""
        if not job.has_api:
            job.decision = None
            return None
        ctx = job.context + job.pending_response
        others = sum(v for k, v in mem.resident.items() if k != job.id)
        est = estimate_batch_context(job.pred.pre_api_len + ctx, self.capacity_tokens, others)
        forced = job.spec.segments[job.seg].strategy
        job.decision = choose_strategy(job.pred, ctx, est, self.cm, forced=forced)
        job.strategy_history.append(job.decision)
        return job.decision

    # -- ranking ----------------------------------------------------------
    def _restore_iters(self, job: Job):
        ctx = job.context + job.pending_response
        if job.restore is Strategy.DISCARD:
            return t_fwd(ctx, self.cm) / self.cm.iter_time
        if job.restore is Strategy.SWAP:
            return t_swap(job.context, self.cm) / self.cm.iter_time
        return 0

    def _score(self, job: Job):
        pre, total = job.predicted_remaining()
        p = job.pred
        rem = Prediction(pre, p.api_duration, p.api_response_len, total)
        area = 0
        if job.restore is not None and job.prev_decision is not None:
            area = restore_area(
                job.restore, job.context, job.pending_response, job.prev_decision.estimate, self.cm
            )
        ctx = job.context + job.pending_response
        return area + memory_time_score(job.spec, rem, job.decision, self.cm, context=ctx)

    def sort_key(self, job: Job) -> tuple:
        policy = self.cfg.policy
        tie = (job.arrival, job.seq)
        if policy is Policy.FCFS:
            return tie
        if policy is Policy.LAMPS:
            return (job.score, *tie)
        _, total = job.predicted_remaining()
        size = total + self._restore_iters(job)
        if policy is Policy.SJF_TOTAL:
            api = sum(job.preds[k].api_duration for k in range(job.seg, len(job.spec.segments)))
            size += api / self.cm.iter_time
        return (size, *tie)

    def refresh_scores(self, jobs: list[Job]) -> None:
        """LAMPS score cache: recompute on re-entry or once stale for the update interval.

        Other policies' keys are cheap and refreshed whenever a job changes.
        """
        lamps = self.cfg.policy is Policy.LAMPS
        interval = self.cfg.score_update_interval
        for job in jobs:
            if lamps:
                if job.score is None or (job.dirty and job.score_age >= interval):
                    job.score = self._score(job)
                    job.score_age = 0
                    job.dirty = False
                    job.rank_key = None
            elif job.dirty:
                job.dirty = False
                job.rank_key = None
            if job.rank_key is None:
                job.rank_key = (not job.starving, *self.sort_key(job))

    def rank_waiting(self, jobs: list[Job]) -> list[Job]:
        """Order ready jobs by policy key; starving jobs first, keeping their relative order."""
        self.refresh_scores(jobs)
        return sorted(jobs, key=lambda j: j.rank_key)

    # -- admission --------------------------------------------------------
    def form_batch(self, ranked: list[Job], mem: MemoryState) -> tuple[list[Job], list[Job]]:
        """Greedy admission in rank order under slot, token and memory limits.

        A candidate fits when its projected end-of-segment context, plus the
        projections of jobs already admitted, plus what every other resident
        request currently holds, stays within the budget. Lower-ranked
        requests may bypass one that does not fit, except that once a
        starving request is blocked only already-resident requests are
        admitted, so memory drains towards it.
        """
        cfg = self.cfg
        cap = self.capacity_tokens
        batch: list[Job] = []
        deferred: list[Job] = []
        reserved = 0
        tokens = 0
        held_total = sum(mem.resident.values())
        admitted_held = 0
        starving_blocked = False
        resident = mem.resident
        for i, job in enumerate(ranked):
            if len(batch) >= cfg.max_batch_size:
                deferred.extend(ranked[i:])
                break
            held = resident.get(job.id, 0)
            room = cap - reserved - (held_total - admitted_held)
            if held == 0 and (starving_blocked or room < 1):
                deferred.append(job)
                continue
            need = job.need(cap)
            fits = need - held <= room
            fits = fits and tokens + job.step_tokens() <= cfg.max_batch_tokens
            if fits:
                batch.append(job)
                reserved += need
                admitted_held += held
                tokens += job.step_tokens()
            else:
                if job.starving:
                    starving_blocked = True
                deferred.append(job)
        for job in batch:
            if not job.starving:
                job.starvation_cnt = 0
        for job in deferred:
            job.starvation_cnt += 1
        return batch, deferred

    def mark_starving(self, jobs: list[Job]) -> list[Job]:
        """Flag jobs bypassed ``starvation_threshold`` times; the flag sticks until completion."""
        for job in jobs:
            if not job.starving and job.starvation_cnt >= self.cfg.starvation_threshold:
                job.starving = True
                job.starvation_cnt = 0
                job.rank_key = None
        return sorted(jobs, key=lambda j: not j.starving)

    def age_scores(self, jobs: list[Job]) -> None:
        for job in jobs:
            job.score_age += 1

    # -- API transitions --------------------------------------------------
    def on_api_encounter(self, job: Job, now, mem: MemoryState, link_free):
        """Move ``job`` into its strategy's wait queue.

        Returns ``(api_finish_time, swap_out_done_or_None)``. Swap-outs are
        serialised on the host link starting at ``link_free``.
        """
        decision = job.decision
        strategy = decision.strategy
        api = job.spec.segments[job.seg].api
        swap_done = None
        job.in_api = True
        if not job.starving:
            job.starvation_cnt = 0
        if strategy is Strategy.DISCARD:
            mem.release(job.id)
            finish = now + api.duration
        elif strategy is Strategy.SWAP:
            swap_done = max(now, link_free) + t_swap(job.context, self.cm)
            finish = swap_done + api.duration
        else:
            finish = now + api.duration
        self.api_queues[strategy][job.id] = finish
        return finish, swap_done

    def on_api_return(self, job: Job, now) -> None:
        """Requeue ``job`` as a fresh segment with its restore step pending."""
        strategy = job.decision.strategy
        self.api_queues[strategy].pop(job.id)
        api = job.spec.segments[job.seg].api
        job.in_api = False
        job.pending_response = api.response_len
        job.restore = None if strategy is Strategy.PRESERVE else strategy
        job.prev_decision = job.decision
        job.seg += 1
        job.seg_emitted = 0
        job.score = None
        job.dirty = True
