"""Traces, synthetic workloads and the length/duration predictor stack."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import optimize, special

from .core import ApiCallSpec, ApiType, DomainError, RequestSpec, Segment, Strategy
from .strategy import Prediction

SCHEMA_VERSION = 1


# -- published API statistics ---------------------------------------------

@dataclass(frozen=True)
class ApiClassStats:
    """Per-class API duration (seconds) and calls-per-request, as (mean, std)."""

    api_type: ApiType
    duration_mean: float
    duration_std: float
    count_mean: float
    count_std: float
    response_len: int = 16

    def __post_init__(self):
        if min(self.duration_mean, self.duration_std, self.count_mean, self.count_std) < 0:
            raise DomainError(f"{self.api_type}: means and stds must be >= 0")


INFERCEPT_CLASSES = (
    ApiClassStats(ApiType.MATH, 9e-5, 6e-5, 3.75, 1.3, response_len=4),
    ApiClassStats(ApiType.QA, 0.69, 0.17, 2.52, 1.73, response_len=32),
    ApiClassStats(ApiType.VE, 0.09, 0.014, 28.18, 15.2, response_len=8),
    ApiClassStats(ApiType.CHATBOT, 28.6, 15.6, 4.45, 1.96, response_len=64),
    ApiClassStats(ApiType.IMAGE, 20.03, 7.8, 6.91, 3.93, response_len=8),
    ApiClassStats(ApiType.TTS, 17.24, 7.6, 6.91, 3.93, response_len=8),
)
TOOLBENCH_CLASSES = (ApiClassStats(ApiType.GENERIC, 1.72, 3.33, 2.45, 1.81, response_len=32),)

BUILTIN_CLASS_SETS = {
    "infercept": INFERCEPT_CLASSES,
    "toolbench": TOOLBENCH_CLASSES,
    **{c.api_type.value.lower(): (c,) for c in INFERCEPT_CLASSES},
}


def load_class_config(name_or_path: str) -> tuple[ApiClassStats, ...]:
    """A builtin set name (``infercept``, ``toolbench``, ``chatbot``...) or a JSON file.

    The JSON form is a list of objects with the ``ApiClassStats`` field names.
    """
    if name_or_path.lower() in BUILTIN_CLASS_SETS:
        return BUILTIN_CLASS_SETS[name_or_path.lower()]
    path = Path(name_or_path)
    if not path.is_file():
        raise DomainError(
            f"{name_or_path!r} is neither a builtin class set ({', '.join(BUILTIN_CLASS_SETS)}) nor a file"
        )
    raw = json.loads(path.read_text())
    return tuple(ApiClassStats(**{**c, "api_type": ApiType(c["api_type"])}) for c in raw)


# -- nonnegative samplers with exact first two moments ----------------------

def _trunc_moments(a, s):
    """Mean and std of N(a, s^2) truncated to [0, inf)."""
    alpha = -a / s
    lam = math.exp(-alpha * alpha / 2) / math.sqrt(2 * math.pi) / special.ndtr(-alpha)
    mean = a + s * lam
    var = s * s * (1 + alpha * lam - lam * lam)
    return mean, math.sqrt(max(var, 0.0))


@lru_cache(maxsize=None)
def _truncnorm_params(cv: float) -> tuple[float, float] | None:
    """Parent (loc, scale) whose zero-truncation has mean 1 and std ``cv``.

    Returns None when no truncated normal reaches that coefficient of
    variation (it is bounded above by 1).
    """
    if cv >= 0.99:
        return None

    def resid(x):
        a, log_s = x
        m, sd = _trunc_moments(a, math.exp(log_s))
        return [m - 1.0, sd - cv]

    sol, info, ok, _ = optimize.fsolve(resid, [1.0, math.log(cv)], full_output=True, xtol=1e-13)
    if ok != 1:
        return None
    return float(sol[0]), float(math.exp(sol[1]))


def sample_nonneg(rng: np.random.Generator, mean: float, std: float, size=None):
    """Nonnegative draws whose mean and std equal ``mean`` and ``std``.

    Uses a zero-truncated normal with moment-matched parent parameters; when
    the coefficient of variation is too large for that family, a gamma with
    the same moments.
    """
    if std == 0 or mean == 0:
        return np.full(size, float(mean)) if size is not None else float(mean)
    cv = std / mean
    params = _truncnorm_params(round(cv, 12))
    if params is None:
        shape = 1.0 / (cv * cv)
        return rng.gamma(shape, mean / shape, size)
    a, s = params
    lo = special.ndtr(-a / s)
    u = rng.uniform(lo, 1.0, size)
    return mean * (a + s * special.ndtri(u))


# -- predictors -----------------------------------------------------------

@dataclass(frozen=True)
class Oracle:
    pass


@dataclass(frozen=True)
class Binned:
    bin_width: int = 10
    n_bins: int = 50

    def __post_init__(self):
        if self.bin_width < 1 or self.n_bins < 1:
            raise DomainError("bin_width and n_bins must be >= 1")


@dataclass(frozen=True)
class Noisy:
    p: float
    inner: object = Oracle()

    def __post_init__(self):
        if self.p < 0:
            raise DomainError("error parameter p must be >= 0")


PredictorKind = Oracle | Binned | Noisy


def bin_midpoint(length, bin_width=10, n_bins=50):
    b = min(int(length // bin_width), n_bins - 1)
    return b * bin_width + bin_width / 2


def predict(kind: PredictorKind, true_values: Prediction, rng: np.random.Generator) -> Prediction:
    """Apply a predictor to the measured values.

    ``Noisy`` draws error ~ N(0, p * value) per field on top of its inner
    predictor and clamps the result at zero.
    """
    if isinstance(kind, Oracle):
        return true_values
    if isinstance(kind, Binned):
        mid = bin_midpoint(true_values.pre_api_len, kind.bin_width, kind.n_bins)
        return Prediction(mid, true_values.api_duration, true_values.api_response_len, true_values.total_remaining_len)
    if isinstance(kind, Noisy):
        base = predict(kind.inner, true_values, rng)
        fields = (base.pre_api_len, base.api_duration, base.api_response_len, base.total_remaining_len)
        z = rng.standard_normal(len(fields))
        return Prediction(*(max(0.0, f + kind.p * f * float(e)) if kind.p else f for f, e in zip(fields, z)))
    raise TypeError(f"unknown predictor {kind!r}")


def true_predictions(req: RequestSpec) -> list[Prediction]:
    """Measured values per segment; the last entry describes the final decode."""
    out = []
    remaining = req.decode_tokens
    for seg in req.segments:
        out.append(Prediction(seg.decode_len, seg.api.duration, seg.api.response_len, remaining))
        remaining -= seg.decode_len
    out.append(Prediction(req.final_decode_len, 0, 0, req.final_decode_len))
    return out


def parse_predictor(name: str, p: float = 0.0, bin_width: int = 10, n_bins: int = 50) -> PredictorKind:
    name = name.lower()
    if name == "oracle":
        return Oracle()
    if name == "binned":
        return Binned(bin_width, n_bins)
    if name == "noisy":
        return Noisy(p, Oracle())
    if name == "noisy-binned":
        return Noisy(p, Binned(bin_width, n_bins))
    raise ValueError(f"unknown predictor {name!r}")


# -- trace files ----------------------------------------------------------

class TraceError(ValueError):
    def __init__(self, line: int, field_name: str, msg: str):
        super().__init__(f"line {line}: {field_name}: {msg}")
        self.line = line
        self.field = field_name


def _require(rec: dict, key: str, line: int, kinds):
    if key not in rec:
        raise TraceError(line, key, "missing")
    v = rec[key]
    if isinstance(v, bool) or not isinstance(v, kinds):
        raise TraceError(line, key, f"expected {kinds}, got {type(v).__name__}")
    return v


def request_from_record(rec: dict, line: int = 0) -> RequestSpec:
    version = rec.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise TraceError(line, "schema_version", f"unsupported version {version}")
    num = (int, float)
    rid = _require(rec, "id", line, (str, int))
    segments = []
    for i, s in enumerate(_require(rec, "segments", line, list)):
        if not isinstance(s, dict):
            raise TraceError(line, f"segments[{i}]", "expected object")
        try:
            api_type = ApiType(s.get("api_type", "Generic"))
            strategy = Strategy(s["strategy"]) if s.get("strategy") is not None else None
            api = ApiCallSpec(api_type, _require(s, "duration", line, num), _require(s, "response_len", line, int))
            segments.append(Segment(_require(s, "decode_len", line, int), api, strategy))
        except (DomainError, ValueError) as exc:
            if isinstance(exc, TraceError):
                raise
            raise TraceError(line, f"segments[{i}]", str(exc)) from None
    fields = {
        "arrival_time": _require(rec, "arrival_time", line, num),
        "prompt_len": _require(rec, "prompt_len", line, int),
        "final_decode_len": _require(rec, "final_decode_len", line, int),
    }
    for key, v in fields.items():
        if v < 0:
            raise TraceError(line, key, f"must be >= 0, got {v}")
    try:
        return RequestSpec(id=str(rid), segments=tuple(segments), **fields)
    except DomainError as exc:
        raise TraceError(line, "request", str(exc)) from None


def request_to_record(req: RequestSpec) -> dict:
    segs = []
    for s in req.segments:
        d = {
            "decode_len": s.decode_len,
            "api_type": s.api.api_type.value,
            "duration": s.api.duration,
            "response_len": s.api.response_len,
        }
        if s.strategy is not None:
            d["strategy"] = s.strategy.value
        segs.append(d)
    return {
        "schema_version": SCHEMA_VERSION,
        "id": req.id,
        "arrival_time": req.arrival_time,
        "prompt_len": req.prompt_len,
        "segments": segs,
        "final_decode_len": req.final_decode_len,
    }


def load_trace(path) -> list[RequestSpec]:
    """Read a JSON-lines trace; blank lines are skipped. Result is sorted by arrival."""
    out = []
    seen = set()
    with open(path) as fh:
        for n, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise TraceError(n, "<record>", f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise TraceError(n, "<record>", "expected a JSON object")
            req = request_from_record(rec, n)
            if req.id in seen:
                raise TraceError(n, "id", f"duplicate id {req.id!r}")
            seen.add(req.id)
            out.append(req)
    return sorted(out, key=lambda r: r.arrival_time)


def save_trace(trace, path) -> None:
    with open(path, "w") as fh:
        for req in trace:
            fh.write(json.dumps(request_to_record(req)) + "\n")


# -- synthetic generation -------------------------------------------------

def generate_synthetic(
    classes,
    n: int,
    arrival_rate: float,
    seed: int,
    decode_range: tuple[int, int] = (1, 200),
    prompt_range: tuple[int, int] = (8, 64),
    max_apis: int | None = None,
) -> list[RequestSpec]:
    """Poisson arrivals; each request draws one API class, its call count and durations.

    Counts are rounded draws clamped at zero (optionally capped by
    ``max_apis``); decode segments are uniform over ``decode_range``.
    """
    if n < 0:
        raise DomainError("n must be >= 0")
    if not arrival_rate > 0:
        raise DomainError("arrival_rate must be > 0")
    classes = tuple(classes)
    if n and not classes:
        raise DomainError("at least one API class is required")
    rng = np.random.default_rng(seed)
    arrivals = np.cumsum(rng.exponential(1.0 / arrival_rate, n))
    out = []
    lo, hi = decode_range
    for i in range(n):
        cls = classes[int(rng.integers(len(classes)))]
        k = max(0, int(round(float(sample_nonneg(rng, cls.count_mean, cls.count_std)))))
        if max_apis is not None:
            k = min(k, max_apis)
        durations = sample_nonneg(rng, cls.duration_mean, cls.duration_std, k)
        decodes = rng.integers(lo, hi + 1, k + 1)
        segments = tuple(
            Segment(int(decodes[j]), ApiCallSpec(cls.api_type, float(durations[j]), cls.response_len))
            for j in range(k)
        )
        out.append(
            RequestSpec(
                id=f"r{i}",
                arrival_time=float(arrivals[i]),
                prompt_len=int(rng.integers(prompt_range[0], prompt_range[1] + 1)),
                segments=segments,
                final_decode_len=int(decodes[k]),
            )
        )
    return out


# -- the three-request worked example -------------------------------------

WORKED_EXAMPLE_PATH = Path(__file__).with_name("data") / "worked_example.jsonl"


def worked_example_trace() -> list[RequestSpec]:
    """Three requests arriving together; lengths and API durations in iterations.

    Each API call carries the handling strategy the example prescribes.
    """
    return load_trace(WORKED_EXAMPLE_PATH)
