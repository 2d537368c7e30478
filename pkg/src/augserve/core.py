"""Domain types, the cost model and the three memory-waste formulas.

All memory quantities are in ``mem_per_token`` units and all waste values are
memory x time (no conversion to bytes).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field


class DomainError(ValueError):
    """Raised when an input falls outside an operation's domain."""


class ApiType(str, enum.Enum):
    MATH = "Math"
    QA = "QA"
    VE = "VE"
    CHATBOT = "Chatbot"
    IMAGE = "Image"
    TTS = "TTS"
    GENERIC = "Generic"


class Strategy(str, enum.Enum):
    """How a request's KV cache is handled while its API call is in flight.

    Declaration order is the tie-break order used by strategy selection.
    """

    PRESERVE = "preserve"
    DISCARD = "discard"
    SWAP = "swap"


@dataclass(frozen=True)
class ApiCallSpec:
    api_type: ApiType = ApiType.GENERIC
    duration: float = 0.0
    response_len: int = 0

    def __post_init__(self):
        if self.duration < 0:
            raise DomainError(f"api duration must be >= 0, got {self.duration}")
        if self.response_len < 0:
            raise DomainError(f"api response_len must be >= 0, got {self.response_len}")


@dataclass(frozen=True)
class Segment:
    """``decode_len`` generated tokens followed by one API call.

    ``strategy`` pins the handling strategy instead of predicting it; used by
    fixtures that prescribe the memory action per request.
    """

    decode_len: int
    api: ApiCallSpec
    strategy: Strategy | None = None

    def __post_init__(self):
        if self.decode_len < 0:
            raise DomainError(f"segment decode_len must be >= 0, got {self.decode_len}")


@dataclass(frozen=True)
class RequestSpec:
    id: str
    arrival_time: float
    prompt_len: int
    segments: tuple[Segment, ...] = ()
    final_decode_len: int = 0

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if self.arrival_time < 0:
            raise DomainError(f"{self.id}: arrival_time must be >= 0")
        # prompt_len 0 is allowed: the worked example models decode-only contexts
        if self.prompt_len < 0:
            raise DomainError(f"{self.id}: prompt_len must be >= 0")
        if self.final_decode_len < 0:
            raise DomainError(f"{self.id}: final_decode_len must be >= 0")
        if not self.segments and self.final_decode_len == 0:
            raise DomainError(f"{self.id}: request has neither API segments nor output")

    @property
    def decode_tokens(self) -> int:
        """Tokens the model generates (API responses excluded)."""
        return sum(s.decode_len for s in self.segments) + self.final_decode_len

    @property
    def output_len(self) -> int:
        """Generated tokens plus appended API response tokens."""
        return self.decode_tokens + sum(s.api.response_len for s in self.segments)

    @property
    def peak_context(self) -> int:
        return self.prompt_len + self.output_len


@dataclass(frozen=True)
class CostModel:
    """Timing and memory coefficients.

    In ``unit_mode`` one decode iteration takes ``iter_time`` (1 by default),
    recomputation of C tokens takes ``ceil(C / recompute_rate)`` and a swap
    takes the constant ``swap_latency``; integer inputs keep every simulated
    time an exact integer.
    """

    mem_per_token: float = 1.0
    iter_time: float = 0.005
    fwd_k1: float = 1e-11
    fwd_k2: float = 5e-11
    model_dim: float = 4096.0
    swap_bandwidth: float = 20000.0
    unit_mode: bool = False
    recompute_rate: int = 1
    swap_latency: float = 1

    def __post_init__(self):
        for name in ("mem_per_token", "iter_time", "fwd_k1", "fwd_k2", "model_dim", "swap_bandwidth"):
            if not getattr(self, name) > 0:
                raise DomainError(f"CostModel.{name} must be > 0")
        if self.recompute_rate < 1:
            raise DomainError("CostModel.recompute_rate must be >= 1")
        if self.swap_latency < 0:
            raise DomainError("CostModel.swap_latency must be >= 0")

    @classmethod
    def units(cls, recompute_rate: int = 1, swap_latency: int = 1, mem_per_token: int = 1) -> CostModel:
        return cls(
            mem_per_token=mem_per_token,
            iter_time=1,
            unit_mode=True,
            recompute_rate=recompute_rate,
            swap_latency=swap_latency,
        )


def _check_nonneg(**values):
    for name, v in values.items():
        if v < 0:
            raise DomainError(f"{name} must be >= 0, got {v}")


def t_fwd(c, cm: CostModel):
    """Time to run a forward (prefill/recompute) pass over ``c`` context tokens."""
    _check_nonneg(c=c)
    if cm.unit_mode:
        return math.ceil(c / cm.recompute_rate)
    return cm.fwd_k1 * c * c * cm.model_dim


def t_swap(c, cm: CostModel):
    """Time to move ``c`` context tokens across the host link in one direction."""
    _check_nonneg(c=c)
    if cm.unit_mode:
        return cm.swap_latency
    return c * cm.mem_per_token / cm.swap_bandwidth


def decode_step_time(context, cm: CostModel):
    """Compute time of one decode step for a sequence that ends at ``context`` tokens."""
    if cm.unit_mode:
        return cm.iter_time
    return cm.fwd_k2 * context * context * cm.model_dim


def _sum_squares(n):
    return n * (n + 1) * (2 * n + 1) // 6


def _sum_cubes(n):
    s = n * (n + 1) // 2
    return s * s


def decode_time(n_prefill, n_decode, cm: CostModel):
    """Sum of per-token decode times, sum_{i=1..n} k2 * (n_prefill + i)^2 * d."""
    _check_nonneg(n_prefill=n_prefill, n_decode=n_decode)
    if cm.unit_mode:
        return n_decode * cm.iter_time
    if n_decode == 0:
        return 0.0
    c, n = n_prefill, n_decode
    if _all_int(c, n):
        sq = _sum_squares(c + n) - _sum_squares(c)
    else:
        sq = (c + n) * (c + n + 1) * (2 * (c + n) + 1) / 6 - c * (c + 1) * (2 * c + 1) / 6
    return cm.fwd_k2 * sq * cm.model_dim


def ramp_area(start_ctx, n_tokens, cm: CostModel):
    """Memory x time while decoding ``n_tokens`` from ``start_ctx``.

    Each step i holds ``start_ctx + i`` tokens for that step's decode time.
    Closed forms keep this O(1); fractional lengths (noisy predictions) fall
    back to the continuous approximation of the same sums.
    """
    m = cm.mem_per_token
    if n_tokens <= 0:
        return 0 * m
    c, n = start_ctx, n_tokens
    exact = _all_int(c, n)
    if cm.unit_mode:
        tri = n * (n + 1) // 2 if exact else n * (n + 1) / 2
        return m * cm.iter_time * (n * c + tri)
    if exact:
        cubes = _sum_cubes(c + n) - _sum_cubes(c)
    else:
        # polynomial extension of sum_{i=1..n} (c+i)^3 to real n
        cubes = ((c + n) * (c + n + 1) / 2) ** 2 - (c * (c + 1) / 2) ** 2
    return m * cm.fwd_k2 * cm.model_dim * cubes


def _all_int(*xs):
    return all(isinstance(x, int) for x in xs)


def waste_preserve(t_int, c_i, m):
    """Memory held idle by a preserved context for the whole API call."""
    _check_nonneg(t_int=t_int, c_i=c_i, m=m)
    return t_int * c_i * m


def waste_discard(c_i, c_other, m, cm: CostModel):
    """Recompute cost: the request's own context plus co-batched contexts stall for T_fwd."""
    _check_nonneg(c_i=c_i, c_other=c_other, m=m)
    fwd = t_fwd(c_i, cm)
    return fwd * c_i * m + fwd * c_other * m


def waste_swap(c_i, c_batch, m, cm: CostModel):
    """Swap-out plus swap-in stall the whole batch."""
    _check_nonneg(c_i=c_i, c_batch=c_batch, m=m)
    if c_i == 0:
        return 0 * m
    return 2 * t_swap(c_i, cm) * c_batch * m


@dataclass
class MemoryState:
    """Device-resident and host-swapped context per request.

    ``resident``/``swapped`` map request id to token counts. Every mutation
    re-checks the capacity invariant.
    """

    capacity: float
    mem_per_token: float = 1.0
    resident: dict[str, int] = field(default_factory=dict)
    swapped: dict[str, int] = field(default_factory=dict)

    @property
    def used(self):
        return sum(self.resident.values()) * self.mem_per_token

    @property
    def free(self):
        return self.capacity - self.used

    def held(self, rid: str) -> int:
        return self.resident.get(rid, 0)

    def _ensure_fits(self, rid: str, tokens: int) -> None:
        after = (sum(self.resident.values()) - self.resident.get(rid, 0) + tokens) * self.mem_per_token
        if after > self.capacity:
            raise AssertionError(f"memory budget exceeded: {after} > {self.capacity} placing {rid!r}")

    def set_resident(self, rid: str, tokens: int) -> None:
        self._ensure_fits(rid, tokens)
        self.swapped.pop(rid, None)
        if tokens:
            self.resident[rid] = tokens
        else:
            self.resident.pop(rid, None)

    def release(self, rid: str) -> int:
        return self.resident.pop(rid, 0)

    def swap_out(self, rid: str) -> None:
        self.swapped[rid] = self.resident.pop(rid)

    def swap_in(self, rid: str) -> int:
        self._ensure_fits(rid, self.swapped[rid])
        tokens = self.swapped.pop(rid)
        self.resident[rid] = tokens
        return tokens

    def check(self) -> None:
        if self.used > self.capacity:
            raise AssertionError(
                f"memory budget exceeded: {self.used} > {self.capacity} ({self.resident})"
            )
        overlap = self.resident.keys() & self.swapped.keys()
        if overlap:
            raise AssertionError(f"requests both resident and swapped: {sorted(overlap)}")
