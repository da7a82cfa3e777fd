"""Trace-based initial ranking.

Pipeline: baseline latency statistics per (service, operation), span-level
dynamic thresholds, per-trace DAGs, four per-service component scores and
their weighted sum.

Components, each in [0, 1]:

* c1 self-anomaly: flagged spans of s / incident spans of s
* c2 trace impact: anomalous traces containing s / anomalous traces
* c3 blast radius: mean child count of s's spans / max of that mean over services
* c4 delay severity: max excess of s's flagged spans / system-wide max excess
"""

from __future__ import annotations

import math
import statistics
from collections import defaultdict
from dataclasses import dataclass

from .config import TwistConfig
from .model import (
    DataError,
    IncidentCase,
    RankEntry,
    Ranking,
    ServiceId,
    Span,
    group_spans_into_traces,
)

MAD_SCALE = 1.4826

SpanKey = tuple[str, str]  # (trace_id, span_id)


class NoBaselineError(DataError):
    def __init__(self, case_id: str = ""):
        super().__init__(f"no baseline: case {case_id!r} has no spans before the incident window")


@dataclass(frozen=True)
class LatencyStats:
    median: float
    mad: float
    mean: float
    stddev: float
    count: int


def latency_stats(durations: list[int] | list[float]) -> LatencyStats:
    if not durations:
        raise ValueError("latency_stats needs at least one duration")
    med = statistics.median(durations)
    mad = statistics.median(abs(d - med) for d in durations)
    return LatencyStats(
        median=float(med),
        mad=float(mad),
        mean=statistics.fmean(durations),
        stddev=statistics.pstdev(durations) if len(durations) > 1 else 0.0,
        count=len(durations),
    )


@dataclass(frozen=True)
class BaselineStats:
    per_key: dict[tuple[ServiceId, str], LatencyStats]
    fallback: LatencyStats

    def lookup(self, service: ServiceId, operation: str) -> LatencyStats:
        return self.per_key.get((service, operation), self.fallback)


def compute_baseline_stats(case: IncidentCase) -> BaselineStats:
    """Latency statistics from spans that start before the incident window."""
    grouped: dict[tuple[ServiceId, str], list[int]] = defaultdict(list)
    pooled: list[int] = []
    for s in case.spans:
        if s.start < case.window_start:
            grouped[(s.service, s.operation)].append(s.duration)
            pooled.append(s.duration)
    if not pooled:
        raise NoBaselineError(case.case_id)
    return BaselineStats(
        per_key={k: latency_stats(v) for k, v in sorted(grouped.items())},
        fallback=latency_stats(pooled),
    )


@dataclass(frozen=True)
class SpanAnomaly:
    span_id: str
    flagged: bool
    threshold: float
    excess: float


def span_threshold(stats: LatencyStats, config: TwistConfig) -> float:
    if stats.mad > 0:
        return stats.median + config.k_mad * MAD_SCALE * stats.mad
    return stats.median * (1 + config.fallback_ratio)


def incident_spans(case: IncidentCase) -> list[Span]:
    return [s for s in case.spans if case.segment(s.start) == "incident"]


def detect_span_anomalies(
    case: IncidentCase, stats: BaselineStats, config: TwistConfig | None = None
) -> dict[SpanKey, SpanAnomaly]:
    """Threshold every incident-window span against its baseline.

    Keys are ``(trace_id, span_id)`` since span ids are only unique per trace.
    """
    config = config or TwistConfig()
    out: dict[SpanKey, SpanAnomaly] = {}
    for s in incident_spans(case):
        threshold = span_threshold(stats.lookup(s.service, s.operation), config)
        flagged = s.duration > threshold
        out[(s.trace_id, s.span_id)] = SpanAnomaly(
            span_id=s.span_id,
            flagged=flagged,
            threshold=threshold,
            excess=max(0.0, s.duration - threshold),
        )
    return out


@dataclass(frozen=True)
class TraceDag:
    trace_id: str
    nodes: tuple[Span, ...]
    edges: tuple[tuple[str, str], ...]  # (parent span id, child span id)
    anomalous: bool = False
    malformed: bool = False

    def child_counts(self) -> dict[str, int]:
        counts = {s.span_id: 0 for s in self.nodes}
        for parent, _ in self.edges:
            counts[parent] += 1
        return counts


def _break_cycles(order: list[str], parent: dict[str, str | None]) -> bool:
    """Cut parent links until the parent graph is a forest; returns True if any were cut."""
    rank = {sid: i for i, sid in enumerate(order)}
    cut = False
    done: set[str] = set()
    for start in order:
        path: list[str] = []
        on_path: set[str] = set()
        cur: str | None = start
        while cur is not None and cur not in done:
            if cur in on_path:
                cycle = path[path.index(cur):]
                victim = min(cycle, key=rank.__getitem__)
                parent[victim] = None
                cut = True
                break
            path.append(cur)
            on_path.add(cur)
            cur = parent[cur]
        done.update(path)
    return cut


def build_trace_dags(spans: list[Span], anomalies: dict[SpanKey, SpanAnomaly] | None = None) -> list[TraceDag]:
    """One DAG per trace; back-edges of cyclic parent chains are dropped and the trace is marked malformed."""
    anomalies = anomalies or {}
    dags = []
    for trace in group_spans_into_traces(spans):
        ids = {s.span_id for s in trace.spans}
        order = [s.span_id for s in trace.spans]
        parent: dict[str, str | None] = {
            s.span_id: s.parent_span_id if s.parent_span_id in ids else None for s in trace.spans
        }
        malformed = _break_cycles(order, parent)
        edges = tuple((parent[sid], sid) for sid in order if parent[sid] is not None)
        anomalous = any(
            anomalies.get((trace.trace_id, sid), None) is not None
            and anomalies[(trace.trace_id, sid)].flagged
            for sid in order
        )
        dags.append(TraceDag(trace.trace_id, trace.spans, edges, anomalous, malformed))
    return dags


@dataclass(frozen=True)
class ComponentScores:
    c1: float
    c2: float
    c3: float
    c4: float
    weights: tuple[float, float, float, float]

    @property
    def components(self) -> tuple[float, float, float, float]:
        return (self.c1, self.c2, self.c3, self.c4)

    @property
    def composite(self) -> float:
        return math.fsum(w * c for w, c in zip(self.weights, self.components))


def component_scores(
    traces: list[TraceDag],
    anomalies: dict[SpanKey, SpanAnomaly],
    config: TwistConfig | None = None,
) -> dict[ServiceId, ComponentScores]:
    config = config or TwistConfig()
    total: dict[ServiceId, int] = defaultdict(int)
    flagged: dict[ServiceId, int] = defaultdict(int)
    children: dict[ServiceId, int] = defaultdict(int)
    max_excess: dict[ServiceId, float] = defaultdict(float)
    in_anomalous: dict[ServiceId, int] = defaultdict(int)
    n_anomalous = 0
    system_max_excess = 0.0

    for dag in traces:
        counts = dag.child_counts()
        services_here = set()
        for s in dag.nodes:
            a = anomalies.get((dag.trace_id, s.span_id))
            if a is None:
                continue
            services_here.add(s.service)
            total[s.service] += 1
            children[s.service] += counts[s.span_id]
            if a.flagged:
                flagged[s.service] += 1
                max_excess[s.service] = max(max_excess[s.service], a.excess)
                system_max_excess = max(system_max_excess, a.excess)
        if dag.anomalous:
            n_anomalous += 1
            for svc in services_here:
                in_anomalous[svc] += 1

    fanout = {svc: children[svc] / total[svc] for svc in total}
    max_fanout = max(fanout.values(), default=0.0)
    out = {}
    for svc in sorted(total):
        out[svc] = ComponentScores(
            c1=flagged[svc] / total[svc],
            c2=in_anomalous[svc] / n_anomalous if n_anomalous else 0.0,
            c3=fanout[svc] / max_fanout if max_fanout > 0 else 0.0,
            c4=max_excess[svc] / system_max_excess if system_max_excess > 0 else 0.0,
            weights=config.weights,
        )
    return out


def rank_components(scores: dict[ServiceId, ComponentScores]) -> Ranking:
    """Order by composite desc, then c4 desc, then name."""
    order = sorted(scores, key=lambda s: (-scores[s].composite, -scores[s].c4, s))
    entries = []
    for svc in order:
        cs = scores[svc]
        entries.append(
            RankEntry(
                svc,
                min(1.0, max(0.0, cs.composite)),
                f"c1={cs.c1:.4f} c2={cs.c2:.4f} c3={cs.c3:.4f} c4={cs.c4:.4f}",
            )
        )
    return Ranking(tuple(entries))


@dataclass(frozen=True)
class TwistResult:
    ranking: Ranking
    components: dict[ServiceId, ComponentScores]
    anomalies: dict[SpanKey, SpanAnomaly]
    dags: list[TraceDag]


def twist_analyze(case: IncidentCase, config: TwistConfig | None = None) -> TwistResult:
    config = config or TwistConfig()
    stats = compute_baseline_stats(case)
    anomalies = detect_span_anomalies(case, stats, config)
    dags = build_trace_dags(incident_spans(case), anomalies)
    components = component_scores(dags, anomalies, config)
    return TwistResult(rank_components(components), components, anomalies, dags)


def twist_rank(case: IncidentCase, config: TwistConfig | None = None) -> Ranking:
    return twist_analyze(case, config).ranking
