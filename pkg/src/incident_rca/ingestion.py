"""Load incident cases from disk and import externally produced rankings.

On-disk layout of a case (all paths relative to the manifest):

* manifest: JSON object with ``case_id``, ``window_start_us``, ``window_end_us``,
  ``metrics``, ``logs``, ``traces``, ``ground_truth_service``, ``ground_truth_fault``
* metrics: CSV ``time,pod,metric,value``
* logs: JSONL objects with ``time,pod,severity,message``
* traces: CSV ``trace_id,span_id,parent_span_id,service,operation,start_us,duration_us``
  (empty parent means root)

All timestamps are integer microseconds since the Unix epoch.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .model import (
    DataError,
    FaultType,
    GroundTruth,
    IncidentCase,
    LogEntry,
    MetricSeries,
    RankEntry,
    Ranking,
    RankingError,
    Severity,
    Span,
    validate_case,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("time", "pod", "metric", "value")
LOG_KEYS = ("time", "pod", "severity", "message")
TRACE_COLUMNS = (
    "trace_id",
    "span_id",
    "parent_span_id",
    "service",
    "operation",
    "start_us",
    "duration_us",
)
MANIFEST_KEYS = ("case_id", "window_start_us", "window_end_us", "metrics", "logs", "traces")


class IngestError(DataError):
    def __init__(self, path: str | Path, line: int | None, reason: str):
        self.path = str(path)
        self.line = line
        self.reason = reason
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {reason}")


class CaseValidationError(DataError):
    def __init__(self, violations):
        self.violations = list(violations)
        lines = "\n  ".join(str(v) for v in self.violations[:20])
        more = f"\n  ... {len(self.violations) - 20} more" if len(self.violations) > 20 else ""
        super().__init__(f"case has {len(self.violations)} violation(s):\n  {lines}{more}")


@dataclass
class LoadReport:
    rows: dict[str, int] = field(default_factory=dict)
    segments: dict[str, Counter] = field(default_factory=dict)


def _parse_int(value: str, path: Path, line: int, column: str) -> int:
    try:
        return int(value)
    except (TypeError, ValueError):
        try:
            f = float(value)
        except (TypeError, ValueError):
            raise IngestError(path, line, f"column {column!r}: not an integer: {value!r}") from None
        if not f.is_integer():
            raise IngestError(path, line, f"column {column!r}: not an integer: {value!r}") from None
        return int(f)


def _open_csv(path: Path, required: tuple[str, ...]):
    fh = path.open(newline="", encoding="utf-8")
    reader = csv.DictReader(fh)
    header = reader.fieldnames
    if header is None:
        return fh, None
    missing = [c for c in required if c not in header]
    if missing:
        fh.close()
        raise IngestError(path, 1, f"missing required column {missing[0]!r}")
    return fh, reader


def read_metrics(path: Path) -> list[MetricSeries]:
    fh, reader = _open_csv(path, METRIC_COLUMNS)
    grouped: dict[tuple[str, str], list[tuple[int, float]]] = defaultdict(list)
    with fh:
        if reader is not None:
            for row in reader:
                line = reader.line_num
                if None in row or any(row[c] is None for c in METRIC_COLUMNS):
                    raise IngestError(path, line, "wrong number of fields")
                t = _parse_int(row["time"], path, line, "time")
                try:
                    value = float(row["value"])
                except ValueError:
                    raise IngestError(path, line, f"column 'value': not numeric: {row['value']!r}") from None
                if not math.isfinite(value):
                    raise IngestError(path, line, f"column 'value': non-finite {row['value']!r}")
                pod, metric = row["pod"].strip(), row["metric"].strip()
                if not pod or not metric:
                    raise IngestError(path, line, "empty pod or metric")
                grouped[(pod, metric)].append((t, value))
    series = []
    for (pod, metric) in sorted(grouped):
        samples = sorted(grouped[(pod, metric)], key=lambda s: s[0])
        series.append(MetricSeries(pod, metric, tuple(samples)))
    return series


def read_logs(path: Path) -> list[LogEntry]:
    entries = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(path, line_no, f"invalid JSON: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise IngestError(path, line_no, "expected a JSON object")
            for key in LOG_KEYS:
                if key not in obj:
                    raise IngestError(path, line_no, f"missing required key {key!r}")
            t = _parse_int(obj["time"], path, line_no, "time")
            if not isinstance(obj["message"], str) or not isinstance(obj["pod"], str):
                raise IngestError(path, line_no, "pod and message must be strings")
            severity = Severity.parse(obj["severity"] if isinstance(obj["severity"], str) else None)
            entries.append(LogEntry(obj["pod"], t, severity, obj["message"]))
    return entries


def read_traces(path: Path) -> list[Span]:
    fh, reader = _open_csv(path, TRACE_COLUMNS)
    spans = []
    with fh:
        if reader is not None:
            for row in reader:
                line = reader.line_num
                if None in row or any(row[c] is None for c in TRACE_COLUMNS):
                    raise IngestError(path, line, "wrong number of fields")
                duration = _parse_int(row["duration_us"], path, line, "duration_us")
                if duration < 0:
                    raise IngestError(path, line, f"negative duration {duration}")
                parent = row["parent_span_id"].strip() or None
                spans.append(
                    Span(
                        trace_id=row["trace_id"],
                        span_id=row["span_id"],
                        parent_span_id=parent,
                        service=row["service"].strip().lower(),
                        operation=row["operation"],
                        start=_parse_int(row["start_us"], path, line, "start_us"),
                        duration=duration,
                    )
                )
    return spans


def load_case_with_report(manifest_path: str | Path, pod_pattern: str | None = None) -> tuple[IncidentCase, LoadReport]:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise IngestError(manifest_path, None, "manifest not found") from None
    except json.JSONDecodeError as exc:
        raise IngestError(manifest_path, exc.lineno, f"invalid JSON: {exc.msg}") from None
    for key in MANIFEST_KEYS:
        if key not in manifest:
            raise IngestError(manifest_path, None, f"missing required key {key!r}")

    root = manifest_path.parent
    paths = {k: root / manifest[k] for k in ("metrics", "logs", "traces")}
    for kind, p in paths.items():
        if not p.is_file():
            raise IngestError(p, None, f"{kind} file not found")

    metrics = read_metrics(paths["metrics"])
    logs = read_logs(paths["logs"])
    spans = read_traces(paths["traces"])

    truth = None
    if manifest.get("ground_truth_service"):
        try:
            fault = FaultType.parse(manifest.get("ground_truth_fault") or "")
        except ValueError:
            raise IngestError(
                manifest_path, None, f"unknown ground_truth_fault {manifest.get('ground_truth_fault')!r}"
            ) from None
        truth = GroundTruth(str(manifest["ground_truth_service"]).lower(), fault)

    case = IncidentCase(
        case_id=str(manifest["case_id"]),
        window=(int(manifest["window_start_us"]), int(manifest["window_end_us"])),
        metrics=tuple(metrics),
        logs=tuple(logs),
        spans=tuple(spans),
        ground_truth=truth,
        pod_pattern=pod_pattern or None,
    )
    report = validate_case(case)
    if not report.clean:
        raise CaseValidationError(report.violations)

    load_report = LoadReport(
        rows={
            "metrics": sum(len(m.samples) for m in metrics),
            "logs": len(logs),
            "traces": len(spans),
        },
        segments={
            "metrics": Counter(case.segment(t) for m in metrics for t, _ in m.samples),
            "logs": Counter(case.segment(e.time) for e in logs),
            "traces": Counter(case.segment(s.start) for s in spans),
        },
    )
    log.info("loaded case %s: %s", case.case_id, load_report.rows)
    return case, load_report


def load_case(manifest_path: str | Path, pod_pattern: str | None = None) -> IncidentCase:
    """Load and validate the case described by ``manifest_path`` (file or directory)."""
    return load_case_with_report(manifest_path, pod_pattern)[0]


def ranking_from_json(rows, source: str = "<ranking>") -> Ranking:
    """Build a Ranking from ``[{candidate, score}, ...]``, max-normalizing when a score exceeds 1."""
    if not isinstance(rows, list) or not rows:
        raise RankingError(f"{source}: expected a non-empty JSON array")
    parsed = []
    for i, row in enumerate(rows):
        if not isinstance(row, dict) or "candidate" not in row or "score" not in row:
            raise RankingError(f"{source}[{i}]: expected an object with candidate and score")
        try:
            score = float(row["score"])
        except (TypeError, ValueError):
            raise RankingError(f"{source}[{i}]: score is not numeric") from None
        if not math.isfinite(score) or score < 0:
            raise RankingError(f"{source}[{i}]: score must be finite and non-negative")
        parsed.append((str(row["candidate"]), score, row.get("rationale")))
    top = max(s for _, s, _ in parsed)
    if top > 1:
        parsed = [(c, s / top, r) for c, s, r in parsed]
    try:
        return Ranking(tuple(RankEntry(c, s, r) for c, s, r in parsed))
    except RankingError as exc:
        raise RankingError(f"{source}: {exc}") from None


def load_external_ranking(path: str | Path) -> Ranking:
    path = Path(path)
    try:
        rows = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestError(path, exc.lineno, f"invalid JSON: {exc.msg}") from None
    return ranking_from_json(rows, str(path))


def write_case(case: IncidentCase, out_dir: str | Path) -> Path:
    """Write ``case`` in the on-disk layout read by ``load_case``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "metrics.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for series in case.metrics:
            writer.writerows((t, series.pod, series.metric, repr(v)) for t, v in series.samples)
    with (out / "logs.jsonl").open("w", encoding="utf-8") as fh:
        for e in case.logs:
            row = {"time": e.time, "pod": e.pod, "severity": e.severity.value, "message": e.message}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    with (out / "traces.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for s in case.spans:
            writer.writerow((s.trace_id, s.span_id, s.parent_span_id or "", s.service, s.operation, s.start, s.duration))
    manifest = {
        "case_id": case.case_id,
        "window_start_us": case.window_start,
        "window_end_us": case.window_end,
        "metrics": "metrics.csv",
        "logs": "logs.jsonl",
        "traces": "traces.csv",
    }
    if case.ground_truth is not None:
        manifest["ground_truth_service"] = case.ground_truth.service
        manifest["ground_truth_fault"] = case.ground_truth.fault_type.value
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
