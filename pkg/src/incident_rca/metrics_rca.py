"""Metrics-based initial ranking: robust anomaly scores, a pairwise Granger
causal graph between services, and personalized PageRank on the reversed graph
so that probability mass accumulates at causes."""

from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .config import MetricsConfig
from .model import IncidentCase, MetricSeries, PodId, Ranking, ServiceId

log = logging.getLogger(__name__)

MAD_SCALE = 1.4826
MAD_FLOOR = 1e-9
SCORE_CAP = 1e12
RANDOM_WALK_RESTART = 0.15


@dataclass(frozen=True)
class MetricAnomaly:
    pod: PodId
    metric: str
    score: float


def _median_mad(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    med = float(np.median(arr))
    return med, float(np.median(np.abs(arr - med)))


def robust_z_max(baseline: list[float], incident: list[float]) -> float:
    """Largest |x - median| / (1.4826 * MAD) over ``incident``, MAD floored, capped at 1e12."""
    if not incident:
        return 0.0
    med, mad = _median_mad(baseline)
    scale = MAD_SCALE * max(mad, MAD_FLOOR)
    worst = max(abs(x - med) for x in incident)
    return min(worst / scale, SCORE_CAP)


def metric_anomaly_scores(case: IncidentCase) -> list[MetricAnomaly]:
    """Per-series robust z score of the incident window against the baseline segment.

    A series without baseline samples borrows the pooled baseline of the same
    metric across pods, or its own incident samples when nothing else exists.
    """
    pooled: dict[str, list[float]] = defaultdict(list)
    split = {}
    for series in case.metrics:
        base = [v for t, v in series.samples if t < case.window_start]
        inc = [v for t, v in series.samples if case.window_start <= t < case.window_end]
        split[(series.pod, series.metric)] = (base, inc)
        pooled[series.metric].extend(base)
    out = []
    for series in case.metrics:
        base, inc = split[(series.pod, series.metric)]
        if not base:
            base = pooled[series.metric] or inc
        out.append(MetricAnomaly(series.pod, series.metric, robust_z_max(base, inc) if base else 0.0))
    return out


def service_anomaly(case: IncidentCase, anomalies: list[MetricAnomaly]) -> dict[ServiceId, float]:
    out: dict[ServiceId, float] = {}
    for a in anomalies:
        svc = case.service_of(a.pod)
        out[svc] = max(out.get(svc, 0.0), a.score)
    return out


@dataclass
class CausalGraph:
    nodes: list[ServiceId]
    edges: dict[tuple[ServiceId, ServiceId], int] = field(default_factory=dict)
    diagnostics: Counter = field(default_factory=Counter)

    def add_link(self, cause: ServiceId, effect: ServiceId) -> None:
        if cause == effect:
            return
        self.edges[(cause, effect)] = self.edges.get((cause, effect), 0) + 1


def resample(series: MetricSeries, origin: int, step_us: int, n_bins: int) -> np.ndarray:
    """Mean per fixed bin on a common grid, forward-filling internal gaps.

    Bins before the first or after the last sample stay NaN.
    """
    sums = np.zeros(n_bins)
    counts = np.zeros(n_bins)
    for t, v in series.samples:
        idx = (t - origin) // step_us
        if 0 <= idx < n_bins:
            sums[idx] += v
            counts[idx] += 1
    out = np.full(n_bins, np.nan)
    has = counts > 0
    out[has] = sums[has] / counts[has]
    if not has.any():
        return out
    first, last = np.flatnonzero(has)[[0, -1]]
    for i in range(first + 1, last + 1):
        if not has[i]:
            out[i] = out[i - 1]
    return out


def _lagged(values: np.ndarray, lag: int) -> np.ndarray:
    n = len(values)
    return np.column_stack([values[lag - j : n - j] for j in range(1, lag + 1)])


def _rss(design: np.ndarray, target: np.ndarray) -> float:
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    resid = target - design @ coef
    return float(resid @ resid)


def granger_pvalue(x: np.ndarray, y: np.ndarray, lag: int) -> float:
    """p-value of the F test that lags of ``x`` improve an AR(lag) model of ``y``."""
    n = len(y)
    target = y[lag:]
    ones = np.ones((n - lag, 1))
    y_lags = _lagged(y, lag)
    x_lags = _lagged(x, lag)
    rss_r = _rss(np.hstack([ones, y_lags]), target)
    rss_u = _rss(np.hstack([ones, y_lags, x_lags]), target)
    dof = n - lag - (2 * lag + 1)
    scale = max(rss_r, 1.0) * 1e-12
    if rss_u <= scale:
        return 0.0 if rss_r > scale else 1.0
    f_stat = max(0.0, (rss_r - rss_u) / lag) / (rss_u / dof)
    return float(sps.f.sf(f_stat, lag, dof))


def granger_graph(case: IncidentCase, config: MetricsConfig | None = None) -> CausalGraph:
    """Service-level graph with one edge count per significant metric-pair Granger link."""
    config = config or MetricsConfig()
    series = [s for s in case.metrics if s.samples]
    graph = CausalGraph(nodes=sorted({case.service_of(s.pod) for s in case.metrics}))
    if len(series) < 2:
        return graph
    step_us = max(1, int(round(config.resample_step_s * 1_000_000)))
    origin = min(s.samples[0][0] for s in series)
    end = max(s.samples[-1][0] for s in series)
    n_bins = (end - origin) // step_us + 1
    grid = [resample(s, origin, step_us, n_bins) for s in series]
    services = [case.service_of(s.pod) for s in series]
    min_samples = 2 * (config.lag + 1) + 2

    for i, x_full in enumerate(grid):
        for j, y_full in enumerate(grid):
            if i == j or services[i] == services[j]:
                continue
            ok = ~(np.isnan(x_full) | np.isnan(y_full))
            if not ok.any():
                graph.diagnostics["insufficient_samples"] += 1
                continue
            lo, hi = np.flatnonzero(ok)[[0, -1]]
            x, y = x_full[lo : hi + 1], y_full[lo : hi + 1]
            if len(x) < min_samples or len(x) - config.lag <= 2 * config.lag + 1:
                graph.diagnostics["insufficient_samples"] += 1
                continue
            if np.ptp(x) == 0 or np.ptp(y) == 0:
                graph.diagnostics["zero_variance"] += 1
                continue
            graph.diagnostics["tested"] += 1
            if granger_pvalue(x, y, config.lag) < config.alpha:
                graph.add_link(services[i], services[j])
                graph.diagnostics["significant"] += 1
    return graph


def personalized_pagerank(
    nodes: list[str],
    edges: dict[tuple[str, str], float],
    personalization: dict[str, float],
    damping: float = 0.85,
    tol: float = 1e-9,
    max_iter: int = 1000,
) -> dict[str, float]:
    """Power iteration; dangling mass returns to the personalization vector."""
    n = len(nodes)
    index = {v: k for k, v in enumerate(nodes)}
    p = np.array([max(0.0, personalization.get(v, 0.0)) for v in nodes], dtype=float)
    p = p / p.sum() if p.sum() > 0 else np.full(n, 1.0 / n)
    out_weight = np.zeros(n)
    transitions = np.zeros((n, n))
    for (src, dst), w in edges.items():
        if src == dst or w <= 0:
            continue
        transitions[index[src], index[dst]] += w
        out_weight[index[src]] += w
    dangling = out_weight == 0
    transitions[~dangling] /= out_weight[~dangling, None]
    x = p.copy()
    for _ in range(max_iter):
        nxt = damping * (x @ transitions + x[dangling].sum() * p) + (1 - damping) * p
        change = np.abs(nxt - x).sum()
        x = nxt
        if change < tol:
            break
    x = x / x.sum()
    return {v: float(x[index[v]]) for v in nodes}


def graph_rank(
    graph: CausalGraph,
    anomalies: dict[ServiceId, float],
    mode: str | None = None,
    config: MetricsConfig | None = None,
) -> Ranking:
    """Rank services by a walk over the reversed causal graph.

    ``pagerank`` uses ``config.damping``; ``random_walk`` reports the stationary
    visit frequency of a walker restarting with probability 0.15, which the same
    power iteration computes in closed form.
    """
    config = config or MetricsConfig()
    mode = mode or config.mode
    if not graph.nodes:
        raise ValueError("graph_rank needs at least one node")
    if mode == "pagerank":
        damping = config.damping
    elif mode == "random_walk":
        damping = 1 - RANDOM_WALK_RESTART
    else:
        raise ValueError(f"unknown ranking mode {mode!r}")
    reversed_edges = {(dst, src): float(w) for (src, dst), w in graph.edges.items()}
    personalization = {v: anomalies.get(v, 0.0) for v in graph.nodes}
    scores = personalized_pagerank(graph.nodes, reversed_edges, personalization, damping)
    rationale = {v: f"{mode} score, anomaly={personalization[v]:.4g}" for v in graph.nodes}
    return Ranking.from_scores(scores, rationale)


def anomaly_ranking(anomalies: dict[ServiceId, float], nodes: list[ServiceId]) -> Ranking:
    total = sum(anomalies.get(v, 0.0) for v in nodes)
    if total > 0:
        scores = {v: anomalies.get(v, 0.0) / total for v in nodes}
    else:
        scores = {v: 1.0 / len(nodes) for v in nodes}
    rationale = {v: "no causal edges; ranked by anomaly score alone" for v in nodes}
    return Ranking.from_scores(scores, rationale)


def metrics_rank(case: IncidentCase, config: MetricsConfig | None = None) -> Ranking:
    config = config or MetricsConfig()
    anomalies = service_anomaly(case, metric_anomaly_scores(case))
    graph = granger_graph(case, config)
    log.debug("granger graph: %d edges, %s", len(graph.edges), dict(graph.diagnostics))
    if not graph.nodes:
        return Ranking(())
    if not graph.edges:
        return anomaly_ranking(anomalies, graph.nodes)
    return graph_rank(graph, anomalies, config.mode, config)
