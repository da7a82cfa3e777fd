"""Domain types shared across the engine, plus case validation and trace grouping."""

from __future__ import annotations

import enum
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

ServiceId = str
PodId = str

# Kubernetes-style replica suffixes: "<name>-<replicaset-hash>-<pod-hash>".
# A suffix must contain a digit so that names like "frontend-email" survive.
_DEFAULT_POD_SUFFIX = re.compile(r"-(?=[a-z0-9]*\d)[a-z0-9]{5,10}$")


class DataError(Exception):
    """Input telemetry violates a data contract."""


class DuplicateSpanError(DataError):
    def __init__(self, duplicates: Sequence[tuple[str, str]]):
        self.duplicates = list(duplicates)
        shown = ", ".join(f"{t}/{s}" for t, s in self.duplicates)
        super().__init__(f"duplicate span ids within trace: {shown}")


def pod_to_service(pod: PodId, pattern: str | re.Pattern | None = None) -> ServiceId:
    """Map a pod name onto the service it runs.

    The default rule lowercases and strips up to two trailing replica-hash
    suffixes. A custom ``pattern`` must contain a named group ``service``.
    """
    name = pod.strip()
    if not name:
        raise ValueError("empty pod name")
    if pattern is not None:
        m = re.match(pattern, name)
        if m is None or not m.group("service"):
            raise ValueError(f"pod name {pod!r} does not match override pattern")
        return m.group("service").lower()
    name = name.lower()
    for _ in range(2):
        stripped = _DEFAULT_POD_SUFFIX.sub("", name)
        if stripped == name or not stripped:
            break
        name = stripped
    return name


class Severity(str, enum.Enum):
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARN = "WARN"
    ERROR = "ERROR"
    FATAL = "FATAL"
    UNKNOWN = "UNKNOWN"

    @classmethod
    def parse(cls, raw: str | None) -> "Severity":
        if raw is None:
            return cls.UNKNOWN
        key = raw.strip().upper()
        if key == "WARNING":
            key = "WARN"
        if key == "CRITICAL":
            key = "FATAL"
        try:
            return cls(key)
        except ValueError:
            return cls.UNKNOWN


class FaultType(str, enum.Enum):
    CPU = "CPU"
    DELAY = "DELAY"
    DISK = "DISK"
    LOSS = "LOSS"
    MEM = "MEM"
    SOCKET = "SOCKET"

    @classmethod
    def parse(cls, raw: str) -> "FaultType":
        return cls(raw.strip().upper())


@dataclass(frozen=True)
class Span:
    trace_id: str
    span_id: str
    parent_span_id: str | None
    service: ServiceId
    operation: str
    start: int
    duration: int

    @property
    def end(self) -> int:
        return self.start + self.duration


@dataclass(frozen=True)
class Trace:
    trace_id: str
    spans: tuple[Span, ...]
    # span ids whose parent_span_id is set but not present in this trace
    dangling: frozenset[str] = frozenset()

    @property
    def roots(self) -> tuple[Span, ...]:
        ids = {s.span_id for s in self.spans}
        return tuple(
            s for s in self.spans if s.parent_span_id is None or s.parent_span_id not in ids
        )

    @property
    def root(self) -> Span:
        return self.roots[0]


@dataclass(frozen=True)
class MetricSeries:
    pod: PodId
    metric: str
    samples: tuple[tuple[int, float], ...]

    @property
    def times(self) -> list[int]:
        return [t for t, _ in self.samples]

    @property
    def values(self) -> list[float]:
        return [v for _, v in self.samples]


@dataclass(frozen=True)
class LogEntry:
    pod: PodId
    time: int
    severity: Severity
    message: str


@dataclass(frozen=True)
class GroundTruth:
    service: ServiceId
    fault_type: FaultType


@dataclass(frozen=True)
class IncidentCase:
    case_id: str
    window: tuple[int, int]
    metrics: tuple[MetricSeries, ...] = ()
    logs: tuple[LogEntry, ...] = ()
    spans: tuple[Span, ...] = ()
    ground_truth: GroundTruth | None = None
    pod_pattern: str | None = None

    @property
    def window_start(self) -> int:
        return self.window[0]

    @property
    def window_end(self) -> int:
        return self.window[1]

    def segment(self, t: int) -> str:
        """Tag a timestamp as ``baseline``, ``incident`` or ``post``."""
        if t < self.window[0]:
            return "baseline"
        if t < self.window[1]:
            return "incident"
        return "post"

    def service_of(self, pod: PodId) -> ServiceId:
        return pod_to_service(pod, self.pod_pattern)

    def services(self) -> list[ServiceId]:
        names = {self.service_of(m.pod) for m in self.metrics}
        names.update(self.service_of(e.pod) for e in self.logs)
        names.update(s.service for s in self.spans)
        return sorted(names)

    def pods_for(self, key: str) -> list[PodId]:
        """Pods whose name equals ``key`` or whose service is ``key``."""
        pods = {m.pod for m in self.metrics} | {e.pod for e in self.logs}
        exact = sorted(p for p in pods if p == key)
        if exact:
            return exact
        return sorted(p for p in pods if self.service_of(p) == key)


@dataclass(frozen=True)
class RankEntry:
    candidate: ServiceId
    score: float
    rationale: str | None = None


class RankingError(ValueError):
    pass


_SCORE_SLACK = 1e-12


@dataclass(frozen=True)
class Ranking:
    """Ordered candidates; scores lie in [0, 1] and never increase down the list."""

    entries: tuple[RankEntry, ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        prev = math.inf
        for e in self.entries:
            if not e.candidate or not e.candidate.strip():
                raise RankingError("empty candidate name")
            if e.candidate in seen:
                raise RankingError(f"duplicate candidate {e.candidate!r}")
            seen.add(e.candidate)
            if not (math.isfinite(e.score) and -_SCORE_SLACK <= e.score <= 1 + _SCORE_SLACK):
                raise RankingError(f"score {e.score!r} of {e.candidate!r} outside [0, 1]")
            if e.score > prev + _SCORE_SLACK:
                raise RankingError(f"scores increase at {e.candidate!r}")
            prev = e.score

    @classmethod
    def from_scores(
        cls,
        scores: dict[ServiceId, float],
        rationales: dict[ServiceId, str] | None = None,
    ) -> "Ranking":
        """Sort by score descending, ties by name; scores are clipped to [0, 1]."""
        rationales = rationales or {}
        order = sorted(scores, key=lambda c: (-scores[c], c))
        return cls(
            tuple(
                RankEntry(c, min(1.0, max(0.0, float(scores[c]))), rationales.get(c))
                for c in order
            )
        )

    @property
    def candidates(self) -> list[ServiceId]:
        return [e.candidate for e in self.entries]

    def score_of(self, candidate: ServiceId) -> float | None:
        for e in self.entries:
            if e.candidate == candidate:
                return e.score
        return None

    def position(self, candidate: ServiceId) -> int | None:
        """1-based rank of ``candidate`` or None."""
        for i, e in enumerate(self.entries, 1):
            if e.candidate == candidate:
                return i
        return None

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> list[dict]:
        out = []
        for e in self.entries:
            row: dict = {"candidate": e.candidate, "score": e.score}
            if e.rationale is not None:
                row["rationale"] = e.rationale
            out.append(row)
        return out


def fuse_rankings(first: Ranking, second: Ranking) -> Ranking:
    """Average of max-normalized scores over the union of candidates (missing counts as 0)."""
    def normalized(r: Ranking) -> dict[str, float]:
        top = max((e.score for e in r.entries), default=0.0)
        return {e.candidate: (e.score / top if top > 0 else 0.0) for e in r.entries}

    a, b = normalized(first), normalized(second)
    scores = {c: 0.5 * a.get(c, 0.0) + 0.5 * b.get(c, 0.0) for c in set(a) | set(b)}
    return Ranking.from_scores(scores)


def group_spans_into_traces(spans: Iterable[Span]) -> list[Trace]:
    """Partition spans by trace id; traces are ordered by id, spans by start time.

    Spans whose parent is missing from their trace are kept and reported in
    ``Trace.dangling``.
    """
    by_trace: dict[str, list[Span]] = defaultdict(list)
    for s in spans:
        by_trace[s.trace_id].append(s)

    duplicates: list[tuple[str, str]] = []
    traces = []
    for trace_id in sorted(by_trace):
        members = by_trace[trace_id]
        ids: set[str] = set()
        for s in members:
            if s.span_id in ids:
                duplicates.append((trace_id, s.span_id))
            ids.add(s.span_id)
        members.sort(key=lambda s: (s.start, s.span_id))
        dangling = frozenset(
            s.span_id
            for s in members
            if s.parent_span_id is not None and s.parent_span_id not in ids
        )
        traces.append(Trace(trace_id, tuple(members), dangling))
    if duplicates:
        raise DuplicateSpanError(duplicates)
    return traces


@dataclass(frozen=True)
class Violation:
    location: str
    message: str

    def __str__(self) -> str:
        return f"{self.location}: {self.message}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.violations

    def add(self, location: str, message: str) -> None:
        self.violations.append(Violation(location, message))


def validate_case(case: IncidentCase) -> ValidationReport:
    """Collect every invariant violation in ``case``; never raises."""
    report = ValidationReport()
    start, end = case.window
    if not start < end:
        report.add("window", f"start {start} must be before end {end}")

    def check_name(location: str, name: str, what: str) -> bool:
        if not name or not name.strip():
            report.add(location, f"empty {what}")
            return False
        return True

    for i, series in enumerate(case.metrics):
        loc = f"metrics[{series.pod}/{series.metric}]"
        if check_name(loc, series.pod, "pod name"):
            _check_resolvable(report, loc, series.pod, case.pod_pattern)
        check_name(loc, series.metric, "metric name")
        prev = None
        for j, (t, v) in enumerate(series.samples):
            if not math.isfinite(v):
                report.add(f"{loc}[{j}]", f"non-finite value {v!r}")
            if prev is not None and t <= prev:
                report.add(f"{loc}[{j}]", f"timestamp {t} not after {prev}")
            prev = t

    for i, entry in enumerate(case.logs):
        if check_name(f"logs[{i}]", entry.pod, "pod name"):
            _check_resolvable(report, f"logs[{i}]", entry.pod, case.pod_pattern)

    seen: dict[tuple[str, str], int] = {}
    for i, s in enumerate(case.spans):
        loc = f"spans[{i}] ({s.trace_id}/{s.span_id})"
        check_name(loc, s.trace_id, "trace id")
        check_name(loc, s.span_id, "span id")
        check_name(loc, s.service, "service")
        if s.duration < 0:
            report.add(loc, f"negative duration {s.duration}")
        if s.parent_span_id is not None and s.parent_span_id == s.span_id:
            report.add(loc, "span is its own parent")
        key = (s.trace_id, s.span_id)
        if key in seen:
            report.add(loc, f"span id duplicates spans[{seen[key]}]")
        else:
            seen[key] = i
    return report


def _check_resolvable(report: ValidationReport, loc: str, pod: str, pattern: str | None) -> None:
    try:
        pod_to_service(pod, pattern)
    except ValueError as exc:
        report.add(loc, str(exc))
