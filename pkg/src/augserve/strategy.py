"""Handling-strategy prediction and the memory-over-time ranking score."""

from __future__ import annotations

from dataclasses import dataclass

from .core import (
    ApiCallSpec,
    CostModel,
    DomainError,
    RequestSpec,
    Strategy,
    ramp_area,
    t_fwd,
    t_swap,
    waste_discard,
    waste_preserve,
    waste_swap,
)


@dataclass(frozen=True)
class Prediction:
    """Predicted shape of a request's remainder, as seen from its next segment.

    ``pre_api_len`` is the decode length before the next API (or to completion
    when no API remains) and ``total_remaining_len`` counts every generated
    token still to come.
    """

    pre_api_len: float
    api_duration: float = 0.0
    api_response_len: float = 0.0
    total_remaining_len: float = 0.0

    def __post_init__(self):
        for name in ("pre_api_len", "api_duration", "api_response_len", "total_remaining_len"):
            if getattr(self, name) < 0:
                raise DomainError(f"Prediction.{name} must be >= 0")


@dataclass(frozen=True)
class BatchContextEstimate:
    c_other: float
    c_batch: float

    def __post_init__(self):
        if not (self.c_batch >= self.c_other >= 0):
            raise DomainError(f"need c_batch >= c_other >= 0, got {self.c_batch}, {self.c_other}")


@dataclass(frozen=True)
class HandlingDecision:
    strategy: Strategy
    waste_preserve: float
    waste_discard: float
    waste_swap: float
    estimate: BatchContextEstimate
    forced: bool = False

    @property
    def wastes(self) -> dict[Strategy, float]:
        return {
            Strategy.PRESERVE: self.waste_preserve,
            Strategy.DISCARD: self.waste_discard,
            Strategy.SWAP: self.waste_swap,
        }


def estimate_batch_context(c_i, capacity_tokens=None, resident_others=0) -> BatchContextEstimate:
    """Context expected to share the device with a request during its API call.

    With a finite budget the batch is assumed saturated (the regime where the
    choice matters); otherwise the current resident snapshot is used.
    """
    if capacity_tokens is not None and capacity_tokens != float("inf"):
        return BatchContextEstimate(c_other=max(capacity_tokens - c_i, 0), c_batch=max(capacity_tokens, c_i))
    return BatchContextEstimate(c_other=resident_others, c_batch=resident_others + c_i)


def choose_strategy(
    pred: Prediction,
    prompt_len,
    est: BatchContextEstimate,
    cm: CostModel,
    forced: Strategy | None = None,
) -> HandlingDecision:
    """Pick the strategy with the least predicted memory waste.

    Ties resolve Preserve, then Discard, then Swap.
    """
    m = cm.mem_per_token
    c_i = prompt_len + pred.pre_api_len
    wp = waste_preserve(pred.api_duration, c_i, m)
    wd = waste_discard(c_i, est.c_other, m, cm)
    ws = waste_swap(c_i, est.c_batch, m, cm)
    if forced is not None:
        return HandlingDecision(forced, wp, wd, ws, est, forced=True)
    best = Strategy.PRESERVE
    best_w = wp
    if wd < best_w:
        best, best_w = Strategy.DISCARD, wd
    if ws < best_w:
        best = Strategy.SWAP
    return HandlingDecision(best, wp, wd, ws, est)


def restore_area(strategy: Strategy, c_i, response_len, est: BatchContextEstimate, cm: CostModel):
    """Area charged when an API returns and the context is brought back.

    Includes the stall imposed on co-batched contexts, matching the second
    terms of the discard and swap waste formulas.
    """
    m = cm.mem_per_token
    if strategy is Strategy.DISCARD:
        ctx = c_i + response_len
        fwd = t_fwd(ctx, cm)
        return ctx * m * fwd + fwd * est.c_other * m
    if strategy is Strategy.SWAP:
        sw = t_swap(c_i, cm) if c_i else 0
        return c_i * m * sw + sw * max(est.c_batch - c_i, 0) * m
    return 0 * m


def api_phase_area(decision: HandlingDecision, pred: Prediction, c_i, cm: CostModel):
    """Area from the API call until the context is usable again."""
    m = cm.mem_per_token
    s = decision.strategy
    if s is Strategy.PRESERVE:
        return c_i * m * pred.api_duration
    restore = restore_area(s, c_i, pred.api_response_len, decision.estimate, cm)
    if s is Strategy.SWAP:
        # swap-out mirrors swap-in
        return 2 * restore
    return restore


def memory_time_score(
    req: RequestSpec,
    pred: Prediction,
    decision: HandlingDecision | None,
    cm: CostModel,
    context=None,
):
    """Predicted memory x time for the rest of ``req``; lower ranks first.

    ``context`` is the current context (defaults to the prompt). With
    ``decision=None`` the remainder has no API and the score is the decode
    ramp over ``total_remaining_len``.
    """
    c0 = req.prompt_len if context is None else context
    if decision is None:
        return ramp_area(c0, pred.total_remaining_len, cm)
    area = ramp_area(c0, pred.pre_api_len, cm)
    c_i = c0 + pred.pre_api_len
    area += api_phase_area(decision, pred, c_i, cm)
    post = max(pred.total_remaining_len - pred.pre_api_len, 0)
    return area + ramp_area(c_i + pred.api_response_len, post, cm)


def segment_for_next_api(req: RequestSpec, completed_segments: int) -> tuple[int, ApiCallSpec | None]:
    if not 0 <= completed_segments <= len(req.segments):
        raise DomainError(
            f"{req.id}: completed_segments={completed_segments} outside [0, {len(req.segments)}]"
        )
    if completed_segments == len(req.segments):
        return req.final_decode_len, None
    seg = req.segments[completed_segments]
    return seg.decode_len, seg.api
