"""Latency/TTFT aggregation and cross-policy comparison."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

from .scheduler import POLICY_ORDER


def nearest_rank(sorted_values, pct):
    """Nearest-rank percentile of an ascending sequence (no interpolation)."""
    if not sorted_values:
        raise ValueError("empty sample")
    rank = max(1, math.ceil(pct / 100 * len(sorted_values)))
    return sorted_values[rank - 1]


def summarize(values) -> dict | None:
    if not values:
        return None
    xs = sorted(values)
    return {
        "mean": math.fsum(xs) / len(xs),
        "median": nearest_rank(xs, 50),
        "p99": nearest_rank(xs, 99),
    }


def aggregate(timelines, horizon=None) -> dict:
    """E2E/TTFT summaries and throughput; summaries are ``None`` for an empty run."""
    e2e = [t.completion - t.arrival for t in timelines]
    ttft = [t.first_token - t.arrival for t in timelines]
    throughput = None
    if timelines:
        last = max(t.completion for t in timelines)
        window = last if horizon is None or math.isinf(horizon) else min(horizon, last)
        if window > 0:
            throughput = len(timelines) / window
    return {
        "completed": len(timelines),
        "e2e_latency": summarize(e2e),
        "ttft": summarize(ttft),
        "throughput": throughput,
    }


def trace_digest(trace) -> str:
    from .workload import request_to_record

    blob = json.dumps([request_to_record(r) for r in trace], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _strategies(t) -> list[str]:
    if hasattr(t, "strategy_history"):
        return [d.strategy.value for d in t.strategy_history]
    return list(getattr(t, "strategies", []))


@dataclass
class SimReport:
    policy: str
    trace_digest: str
    timelines: list = field(default_factory=list)
    rejected: list = field(default_factory=list)
    unfinished: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    horizon: float | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "trace_digest": self.trace_digest,
            "horizon": self.horizon,
            "config": self.config,
            "aggregates": self.aggregates,
            "rejected": self.rejected,
            "unfinished": self.unfinished,
            "timelines": [
                {
                    "id": t.id,
                    "arrival": t.arrival,
                    "first_token": t.first_token,
                    "completion": t.completion,
                    "tokens_emitted": t.tokens_emitted,
                    "strategies": _strategies(t),
                }
                for t in self.timelines
            ],
        }

    def check_consistent(self) -> None:
        """Raise if the stored aggregates differ from ones recomputed from the timelines."""
        fresh = aggregate(self.timelines, self.horizon)
        if fresh != self.aggregates:
            raise ValueError(f"{self.policy}: stored aggregates do not match the timelines")

    @classmethod
    def from_dict(cls, d: dict) -> SimReport:
        from types import SimpleNamespace

        timelines = [SimpleNamespace(**t) for t in d["timelines"]]
        return cls(
            policy=d["policy"],
            trace_digest=d["trace_digest"],
            timelines=timelines,
            rejected=d.get("rejected", []),
            unfinished=d.get("unfinished", []),
            aggregates=d["aggregates"],
            horizon=d.get("horizon"),
            config=d.get("config", {}),
        )


METRICS = (
    ("e2e_latency", "mean"),
    ("e2e_latency", "median"),
    ("e2e_latency", "p99"),
    ("ttft", "mean"),
    ("ttft", "median"),
    ("ttft", "p99"),
    ("throughput", None),
)


def _metric(agg, group, stat):
    v = agg.get(group)
    if stat is None or v is None:
        return v
    return v[stat]


def _policy_rank(name):
    names = [p.value for p in POLICY_ORDER]
    return (names.index(name), name) if name in names else (len(names), name)


class TraceMismatch(ValueError):
    pass


def compare(reports: dict[str, SimReport], baseline: str = "fcfs") -> list[dict]:
    """One row per policy: absolute metrics and percentage deltas vs ``baseline``.

    Rows are ordered FCFS, SJF, SJF-total, LAMPS, then any others by name.
    """
    digests = {r.trace_digest for r in reports.values()}
    if len(digests) > 1:
        raise TraceMismatch(f"reports were produced from different traces: {sorted(digests)}")
    if baseline not in reports:
        raise KeyError(f"baseline policy {baseline!r} not among {sorted(reports)}")
    base = reports[baseline].aggregates
    rows = []
    for name in sorted(reports, key=_policy_rank):
        agg = reports[name].aggregates
        row = {"policy": name}
        for group, stat in METRICS:
            key = group if stat is None else f"{group}_{stat}"
            v = _metric(agg, group, stat)
            b = _metric(base, group, stat)
            row[key] = v
            row[f"{key}_delta_pct"] = None if v is None or not b else (v - b) / b * 100
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    """Aligned text table of absolute values with deltas in parentheses."""
    cols = [group if stat is None else f"{group}_{stat}" for group, stat in METRICS]
    header = ["policy", *cols]
    body = []
    for row in rows:
        cells = [row["policy"]]
        for c in cols:
            v, d = row[c], row[f"{c}_delta_pct"]
            cell = "-" if v is None else f"{v:.4g}"
            if d is not None:
                cell += f" ({d:+.1f}%)"
            cells.append(cell)
        body.append(cells)
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body]
    return "\n".join(lines)


def _config_dict(cfg) -> dict:
    from dataclasses import asdict

    sched = asdict(cfg.scheduler)
    sched["policy"] = cfg.scheduler.policy.value
    if math.isinf(sched["starvation_threshold"]):
        sched["starvation_threshold"] = None
    return {
        "cost": asdict(cfg.cost),
        "scheduler": sched,
        "predictor": repr(cfg.predictor),
        "seed": cfg.seed,
    }


def simulate(trace, cfg, event_sink=None) -> SimReport:
    """Run one simulation and summarise it."""
    from .engine import run

    result = run(trace, cfg, event_sink)
    horizon = None if math.isinf(cfg.horizon) else cfg.horizon
    return SimReport(
        policy=cfg.scheduler.policy.value,
        trace_digest=trace_digest(trace),
        timelines=result.timelines,
        rejected=result.rejected,
        unfinished=result.unfinished,
        aggregates=aggregate(result.timelines, horizon),
        horizon=horizon,
        config=_config_dict(cfg),
    )


def write_csv(rows: list[dict], fh) -> None:
    """Comparison rows as CSV, for external plotting."""
    import csv

    if not rows:
        return
    writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)
