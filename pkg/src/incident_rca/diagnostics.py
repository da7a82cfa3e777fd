"""Per-pod diagnostic bundle: windowed metric profile (table and PNG chart),
service dependency subgraph from traces, and an error-centric log corpus."""

from __future__ import annotations

import io
import math
import random
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace

from .config import DiagConfig
from .model import DataError, IncidentCase, LogEntry, PodId, ServiceId, Severity

CHARS_PER_TOKEN = 4
PANEL_PX = (900, 300)
_PALETTE = {"mean": "#1f77b4", "max": "#d62728", "p95": "#ff7f0e"}

DEFAULT_EXCEPTION_PATTERNS = ("exception", "traceback", "panic", "fatal")
ERROR_SEVERITIES = frozenset({Severity.ERROR, Severity.FATAL})

_TS_PREFIX = re.compile(
    r"""^\s*[\[(]?\s*(?:
        \d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}(?::\d{2}(?:[.,]\d+)?)?(?:Z|[+-]\d{2}:?\d{2})?
        |\d{10}(?:\.\d+)?(?!\d)
        |\d{13,19}
    )\s*[\])]?\s*[-:|]?\s*""",
    re.VERBOSE,
)


class UnknownPodError(DataError):
    pass


@dataclass(frozen=True)
class WindowRow:
    window_start: int
    count: int
    mean: float | None
    max: float | None
    p95: float | None


@dataclass(frozen=True)
class ProfileAggregate:
    pod: PodId
    window_s: int
    metrics: dict[str, tuple[WindowRow, ...]]
    origin: int = 0  # grid alignment point, the incident window start

    @property
    def empty(self) -> bool:
        return all(row.count == 0 for rows in self.metrics.values() for row in rows)


def nearest_rank_percentile(values: list[float], q: float) -> float:
    ordered = sorted(values)
    rank = max(1, math.ceil(q / 100 * len(ordered)))
    return ordered[rank - 1]


def case_span(case: IncidentCase) -> tuple[int, int]:
    """Half-open time range covered by the case window and all metric samples."""
    lo, hi = case.window
    for series in case.metrics:
        if series.samples:
            lo = min(lo, series.samples[0][0])
            hi = max(hi, series.samples[-1][0] + 1)
    return lo, hi


def aggregate_profile(case: IncidentCase, pod: str, window_s: int = 300) -> ProfileAggregate:
    """Bucket each metric of ``pod`` into windows aligned to the incident window start.

    ``pod`` may also name a service; all of its pods are included and metric
    keys are then prefixed with the pod name when more than one pod matches.
    """
    pods = case.pods_for(pod)
    series = [s for s in case.metrics if s.pod in pods]
    if not series:
        raise UnknownPodError(f"no metric series for pod {pod!r}")
    width = window_s * 1_000_000
    origin = case.window_start
    lo, hi = case_span(case)
    first = (lo - origin) // width
    last = -((origin - hi) // width) - 1  # ceil((hi - origin) / width) - 1
    starts = [origin + k * width for k in range(first, last + 1)]

    multi = len({s.pod for s in series}) > 1
    metrics: dict[str, tuple[WindowRow, ...]] = {}
    for s in sorted(series, key=lambda s: (s.pod, s.metric)):
        buckets: dict[int, list[float]] = defaultdict(list)
        for t, v in s.samples:
            buckets[(t - origin) // width].append(v)
        rows = []
        for k, start in zip(range(first, last + 1), starts):
            vals = buckets.get(k, [])
            if vals:
                rows.append(
                    WindowRow(start, len(vals), math.fsum(vals) / len(vals), max(vals),
                              nearest_rank_percentile(vals, 95))
                )
            else:
                rows.append(WindowRow(start, 0, None, None, None))
        key = f"{s.pod}:{s.metric}" if multi else s.metric
        metrics[key] = tuple(rows)
    return ProfileAggregate(pod, window_s, metrics, origin)


def _fmt(v: float | None) -> str:
    return "-" if v is None else f"{v:.4g}"


def profile_table(profile: ProfileAggregate, max_rows: int | None = None) -> str:
    """Plain-text rendering; window starts in seconds relative to the incident window start."""
    lines = [f"performance profile for {profile.pod} ({profile.window_s}s windows)"]
    if profile.empty:
        lines.append("no samples")
        return "\n".join(lines)
    for metric, rows in profile.metrics.items():
        shown = rows if max_rows is None else rows[-max_rows:]
        lines.append(f"[{metric}]")
        lines.append("window_start_s  n  mean  max  p95")
        for row in shown:
            start = (row.window_start - profile.origin) / 1e6
            if row.count == 0:
                lines.append(f"{start:g}  0  no samples")
            else:
                lines.append(f"{start:g}  {row.count}  {_fmt(row.mean)}  {_fmt(row.max)}  {_fmt(row.p95)}")
        if len(shown) < len(rows):
            lines.append(f"({len(rows) - len(shown)} earlier windows omitted)")
    return "\n".join(lines)


@dataclass(frozen=True)
class ProfileChart:
    png: bytes | None
    table: str


def render_profile_chart(profile: ProfileAggregate) -> ProfileChart:
    """Deterministic PNG with one 900x300 panel per metric, plus the text table."""
    table = profile_table(profile)
    if not profile.metrics or profile.empty:
        return ProfileChart(None, table)

    import matplotlib

    matplotlib.use("Agg")
    from matplotlib.figure import Figure

    names = list(profile.metrics)
    dpi = 100
    fig = Figure(figsize=(PANEL_PX[0] / dpi, PANEL_PX[1] * len(names) / dpi), dpi=dpi)
    for i, name in enumerate(names, 1):
        ax = fig.add_subplot(len(names), 1, i)
        rows = profile.metrics[name]
        xs = [(r.window_start - profile.origin) / 1e6 for r in rows]
        for stat, color in _PALETTE.items():
            ys = [getattr(r, stat) if getattr(r, stat) is not None else float("nan") for r in rows]
            ax.plot(xs, ys, color=color, marker="o", linewidth=1.2, label=stat)
        ax.set_title(f"{profile.pod} {name}", fontsize=9)
        ax.set_xlabel("window start (s)", fontsize=8)
        ax.legend(loc="upper left", fontsize=7)
        ax.tick_params(labelsize=7)
    fig.subplots_adjust(hspace=0.6)
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=dpi, metadata={"Software": None})
    return ProfileChart(buf.getvalue(), table)


@dataclass(frozen=True)
class DependencySubgraph:
    center: ServiceId
    predecessors: dict[ServiceId, int]
    successors: dict[ServiceId, int]

    def text(self) -> str:
        def fmt(d: dict[str, int]) -> str:
            return ", ".join(f"{k} ({v} calls)" for k, v in sorted(d.items())) or "none"

        return (
            f"service dependency subgraph for {self.center}\n"
            f"callers (predecessors): {fmt(self.predecessors)}\n"
            f"callees (successors): {fmt(self.successors)}"
        )


def service_call_graph(case: IncidentCase) -> Counter:
    """Call counts between services over every parent-child span pair with distinct services."""
    by_key = {(s.trace_id, s.span_id): s for s in case.spans}
    calls: Counter = Counter()
    for s in case.spans:
        if s.parent_span_id is None:
            continue
        parent = by_key.get((s.trace_id, s.parent_span_id))
        if parent is not None and parent.service != s.service:
            calls[(parent.service, s.service)] += 1
    return calls


def extract_subgraph(case: IncidentCase, service: ServiceId, calls: Counter | None = None) -> DependencySubgraph:
    calls = service_call_graph(case) if calls is None else calls
    preds = {src: n for (src, dst), n in calls.items() if dst == service}
    succs = {dst: n for (src, dst), n in calls.items() if src == service}
    return DependencySubgraph(service, dict(sorted(preds.items())), dict(sorted(succs.items())))


@dataclass(frozen=True)
class LogStats:
    total_in: int
    errors_in: int
    deduped: int
    sampled: bool
    backfilled: int = 0
    truncated: int = 0


@dataclass(frozen=True)
class RefinedLogCorpus:
    pod: PodId
    entries: tuple[LogEntry, ...]
    stats: LogStats
    empty_marker: bool = False

    def text(self) -> str:
        if self.empty_marker:
            return f"logs for {self.pod}: source log was empty"
        head = (
            f"logs for {self.pod}: {self.stats.total_in} lines in, {self.stats.errors_in} error-level, "
            f"{self.stats.deduped} duplicates removed"
            + (", randomly sampled" if self.stats.sampled else "")
            + (f", {self.stats.truncated} dropped for size" if self.stats.truncated else "")
        )
        if not self.entries:
            return head + "\n(no entries retained)"
        body = "\n".join(f"{e.time} {e.severity.value} {e.message}" for e in self.entries)
        return f"{head}\n{body}"


def normalize_message(message: str) -> str:
    """Strip leading timestamps so repeated messages compare equal."""
    prev = None
    text = message
    while prev != text:
        prev = text
        text = _TS_PREFIX.sub("", text, count=1)
    return text.strip()


def is_error_entry(entry: LogEntry, patterns: tuple[str, ...] = DEFAULT_EXCEPTION_PATTERNS) -> bool:
    if entry.severity in ERROR_SEVERITIES:
        return True
    lowered = entry.message.lower()
    return any(p in lowered for p in patterns)


def refine_logs(
    pod: PodId,
    source: list[LogEntry] | tuple[LogEntry, ...],
    cap: int = 200,
    seed: int = 0,
    patterns: tuple[str, ...] = DEFAULT_EXCEPTION_PATTERNS,
) -> RefinedLogCorpus:
    if not source:
        return RefinedLogCorpus(pod, (), LogStats(0, 0, 0, False), empty_marker=True)
    ordered = sorted(enumerate(source), key=lambda p: (p[1].time, p[0]))
    errors = [p for p in ordered if is_error_entry(p[1], patterns)]
    others = [p for p in ordered if not is_error_entry(p[1], patterns)]

    seen: set[str] = set()
    unique = []
    for p in errors:
        key = normalize_message(p[1].message)
        if key not in seen:
            seen.add(key)
            unique.append(p)
    deduped = len(errors) - len(unique)

    sampled = False
    if len(unique) > cap:
        rng = random.Random(seed)
        picks = sorted(rng.sample(range(len(unique)), cap))
        kept = [unique[i] for i in picks]
        sampled = True
    else:
        kept = unique

    backfill = []
    if len(kept) < cap:
        seen_other: set[str] = set()
        for p in reversed(others):
            if len(kept) + len(backfill) >= cap:
                break
            key = normalize_message(p[1].message)
            if key in seen_other:
                continue
            seen_other.add(key)
            backfill.append(p)
    chosen = sorted(kept + backfill, key=lambda p: (p[1].time, p[0]))
    return RefinedLogCorpus(
        pod,
        tuple(p[1] for p in chosen),
        LogStats(len(source), len(errors), deduped, sampled, len(backfill)),
    )


def abstract_logs(
    case: IncidentCase,
    pod: str,
    cap: int = 200,
    seed: int = 0,
    patterns: tuple[str, ...] = DEFAULT_EXCEPTION_PATTERNS,
) -> RefinedLogCorpus:
    """Error-centric log corpus for ``pod`` (or every pod of a service)."""
    pods = set(case.pods_for(pod))
    source = [e for e in case.logs if e.pod in pods]
    return refine_logs(pod, source, cap, seed, patterns)


@dataclass(frozen=True)
class DiagnosticBundle:
    pod: str
    profile: ProfileAggregate | None
    chart: bytes | None
    table: str
    subgraph: DependencySubgraph
    logs: RefinedLogCorpus
    truncation: dict[str, int] = field(default_factory=dict)

    def text(self) -> str:
        return "\n\n".join([self.table, self.subgraph.text(), self.logs.text()])

    def estimated_tokens(self) -> int:
        return estimate_tokens(self.text())

    def to_json(self) -> dict:
        profile = None
        if self.profile is not None:
            profile = {
                "pod": self.profile.pod,
                "window_s": self.profile.window_s,
                "origin": self.profile.origin,
                "metrics": {
                    name: [row.__dict__ for row in rows] for name, rows in self.profile.metrics.items()
                },
            }
        return {
            "pod": self.pod,
            "profile": profile,
            "has_chart": self.chart is not None,
            "table": self.table,
            "subgraph": {
                "center": self.subgraph.center,
                "predecessors": self.subgraph.predecessors,
                "successors": self.subgraph.successors,
            },
            "logs": {
                "entries": [
                    {"time": e.time, "pod": e.pod, "severity": e.severity.value, "message": e.message}
                    for e in self.logs.entries
                ],
                "stats": self.logs.stats.__dict__,
                "empty_marker": self.logs.empty_marker,
            },
            "truncation": self.truncation,
        }


def estimate_tokens(text: str) -> int:
    return -(-len(text) // CHARS_PER_TOKEN)


def build_bundle(case: IncidentCase, pod: str, config: DiagConfig | None = None,
                 calls: Counter | None = None, render_chart: bool = True) -> DiagnosticBundle:
    """Compose the three artifacts for ``pod`` and fit them into the token budget.

    Logs are trimmed first (backfill lines before error lines, oldest first),
    then the oldest profile table rows; the subgraph is never trimmed.
    """
    config = config or DiagConfig()
    if not case.pods_for(pod) and pod not in {s.service for s in case.spans}:
        raise UnknownPodError(f"pod {pod!r} not present in case {case.case_id!r}")
    service = pod if pod in case.services() else case.service_of(pod)

    try:
        profile = aggregate_profile(case, pod, config.window_s)
    except UnknownPodError:
        profile = None
    if profile is None:
        png, table = None, f"performance profile for {pod}\nno samples"
    elif render_chart:
        chart = render_profile_chart(profile)
        png, table = chart.png, chart.table
    else:
        png, table = None, profile_table(profile)
    subgraph = extract_subgraph(case, service, calls)
    logs = abstract_logs(case, pod, config.log_cap, config.seed)
    bundle = DiagnosticBundle(pod, profile, png, table, subgraph, logs)
    return fit_budget(bundle, config.token_budget)


def fit_budget(bundle: DiagnosticBundle, budget: int) -> DiagnosticBundle:
    if bundle.estimated_tokens() <= budget:
        return bundle
    entries = list(bundle.logs.entries)
    removal = [i for i, e in enumerate(entries) if not is_error_entry(e)]
    removal += [i for i, e in enumerate(entries) if is_error_entry(e)]
    chars = len(bundle.text())
    limit = budget * CHARS_PER_TOKEN
    removed: set[int] = set()
    for idx in removal:
        if chars <= limit:
            break
        e = entries[idx]
        removed.add(idx)
        chars -= len(f"{e.time} {e.severity.value} {e.message}") + 1
    dropped = len(removed)
    if dropped:
        kept = tuple(e for i, e in enumerate(entries) if i not in removed)
        logs = replace(bundle.logs, entries=kept, stats=replace(bundle.logs.stats, truncated=dropped))
        bundle = replace(bundle, logs=logs)
    rows_dropped = 0
    if bundle.estimated_tokens() > budget and bundle.profile is not None:
        longest = max((len(r) for r in bundle.profile.metrics.values()), default=0)
        for keep in range(longest - 1, -1, -1):
            rows_dropped = longest - keep
            bundle = replace(bundle, table=profile_table(bundle.profile, max_rows=keep))
            if bundle.estimated_tokens() <= budget:
                break
    return replace(bundle, truncation={"log_entries": dropped, "table_rows": rows_dropped})
