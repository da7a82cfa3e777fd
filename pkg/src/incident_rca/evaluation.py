"""Ranking accuracy over incident suites and checklist-based report scoring."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Sequence

from .agents.backends import ChatTurn, LlmBackend, TransportError
from .agents.prompts import extract_json, render
from .agents.workflow import IncidentReport
from .ingestion import IngestError, ranking_from_json
from .model import DataError, FaultType, Ranking, ServiceId

log = logging.getLogger(__name__)

SURE_DIMENSIONS = ("CausalSoundness", "Actionability", "IncidentSpecificity", "Clarity")
FAULT_COLUMNS = (
    (FaultType.CPU, "CPU"),
    (FaultType.DELAY, "Delay"),
    (FaultType.DISK, "Disk"),
    (FaultType.LOSS, "Loss"),
    (FaultType.MEM, "Mem"),
    (FaultType.SOCKET, "Socket"),
)


@dataclass(frozen=True)
class EvalRecord:
    case_id: str
    predicted: Ranking
    truth: ServiceId
    fault_type: FaultType | None = None

    def __post_init__(self) -> None:
        if not self.predicted.entries:
            raise ValueError(f"record {self.case_id!r} has an empty prediction")

    def hit_position(self) -> int | None:
        truth = self.truth.strip().lower()
        for i, c in enumerate(self.predicted.candidates, 1):
            if c.strip().lower() == truth:
                return i
        return None


def acc_at_k(records: Sequence[EvalRecord], k: int) -> float:
    """Fraction of records whose truth is within the top ``k`` predictions."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not records:
        raise ValueError("no records to evaluate")
    hits = 0
    for r in records:
        pos = r.hit_position()
        if pos is not None and pos <= k:
            hits += 1
    return hits / len(records)


def avg_at_k(records: Sequence[EvalRecord], k: int) -> float:
    """Mean of acc_at_k over j = 1..k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return sum(acc_at_k(records, j) for j in range(1, k + 1)) / k


@dataclass(frozen=True)
class Scores:
    n: int
    ac1: float
    avg3: float
    avg5: float

    @classmethod
    def of(cls, records: Sequence[EvalRecord]) -> "Scores":
        return cls(len(records), acc_at_k(records, 1), avg_at_k(records, 3), avg_at_k(records, 5))


@dataclass(frozen=True)
class EvalSummary:
    overall: Scores
    per_fault: dict[str, Scores] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.overall.n

    def to_json(self) -> dict:
        def cell(s: Scores) -> dict:
            return {"n": s.n, "ac1": s.ac1, "avg3": s.avg3, "avg5": s.avg5}

        return {"overall": cell(self.overall), "per_fault": {k: cell(v) for k, v in self.per_fault.items()}}

    def csv_rows(self) -> tuple[list[str], list[str]]:
        header = ["n", "AC@1", "Avg@3", "Avg@5"]
        row = [str(self.overall.n), *(f"{v * 100:.2f}" for v in (self.overall.ac1, self.overall.avg3, self.overall.avg5))]
        for _, label in FAULT_COLUMNS:
            header += [f"{label} AC@1", f"{label} Avg@3", f"{label} Avg@5"]
            s = self.per_fault.get(label)
            row += [f"{v * 100:.2f}" for v in (s.ac1, s.avg3, s.avg5)] if s else ["", "", ""]
        return header, row


def summarize(records: Sequence[EvalRecord]) -> EvalSummary:
    per_fault = {}
    for fault, label in FAULT_COLUMNS:
        subset = [r for r in records if r.fault_type == fault]
        if subset:
            per_fault[label] = Scores.of(subset)
    return EvalSummary(Scores.of(records), per_fault)


def load_predictions(path: str | Path) -> dict[str, Ranking]:
    path = Path(path)
    try:
        rows = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestError(path, exc.lineno, f"invalid JSON: {exc.msg}") from None
    if not isinstance(rows, list):
        raise IngestError(path, None, "expected a JSON array of predictions")
    out = {}
    for i, row in enumerate(rows):
        if not isinstance(row, dict) or "case_id" not in row or "ranking" not in row:
            raise IngestError(path, None, f"prediction {i} needs case_id and ranking")
        case_id = str(row["case_id"])
        if case_id in out:
            raise IngestError(path, None, f"duplicate prediction for case {case_id!r}")
        out[case_id] = ranking_from_json(row["ranking"], f"{path}[{case_id}]")
    return out


def _manifest_truths(suite: Path) -> dict[str, tuple[str | None, str | None]]:
    truths = {}
    for manifest in sorted(suite.glob("*/manifest.json")):
        obj = json.loads(manifest.read_text(encoding="utf-8"))
        truths[str(obj["case_id"])] = (obj.get("ground_truth_service"), obj.get("ground_truth_fault"))
    return truths


def evaluate_suite(
    suite_dir: str | Path,
    predictions: str | Path | None = None,
    out_dir: str | Path | None = None,
) -> EvalSummary:
    """Score ``predictions.json`` against the manifests of the case directories in ``suite_dir``.

    Writes ``summary.json`` and ``summary.csv`` to ``out_dir`` when given.
    """
    suite = Path(suite_dir)
    preds = load_predictions(predictions or suite / "predictions.json")
    truths = _manifest_truths(suite)
    missing = sorted(c for c in preds if c not in truths or not truths[c][0])
    if missing:
        raise DataError(f"predictions without ground truth: {', '.join(missing)}")
    records = []
    for case_id in sorted(preds):
        service, fault = truths[case_id]
        records.append(
            EvalRecord(case_id, preds[case_id], str(service).lower(), FaultType.parse(fault) if fault else None)
        )
    summary = summarize(records)
    if out_dir is not None:
        write_summary(summary, out_dir)
    return summary


def write_summary(summary: EvalSummary, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary.to_json(), indent=2, sort_keys=True) + "\n")
    header, row = summary.csv_rows()
    with (out / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerow(row)


# --- SURE-style checklist scoring ---------------------------------------------


class ChecklistError(ValueError):
    pass


@dataclass(frozen=True)
class SureChecklist:
    questions: dict[str, tuple[str, ...]]

    def __post_init__(self) -> None:
        if set(self.questions) != set(SURE_DIMENSIONS):
            raise ChecklistError(f"checklist must have exactly the dimensions {SURE_DIMENSIONS}")
        for dim, qs in self.questions.items():
            if not qs or any(not isinstance(q, str) or not q.strip() for q in qs):
                raise ChecklistError(f"dimension {dim} needs at least one non-empty question")

    @classmethod
    def from_json(cls, obj: dict) -> "SureChecklist":
        if not isinstance(obj, dict):
            raise ChecklistError("checklist must be a JSON object")
        return cls({dim: tuple(qs or ()) for dim, qs in obj.items()})

    @classmethod
    def load(cls, path: str | Path) -> "SureChecklist":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def default(cls) -> "SureChecklist":
        text = resources.files("incident_rca").joinpath("resources", "sure_checklist.json").read_text("utf-8")
        return cls.from_json(json.loads(text))


@dataclass(frozen=True)
class DimensionScore:
    yes: int
    total: int
    flagged: int = 0

    @property
    def score(self) -> float:
        return float(1 + Fraction(4 * self.yes, self.total))


@dataclass(frozen=True)
class SureResult:
    dimensions: dict[str, DimensionScore]
    answers: tuple[dict, ...] = ()

    @property
    def average(self) -> float:
        return float(sum(Fraction(d.score) for d in self.dimensions.values()) / len(self.dimensions))

    def to_json(self) -> dict:
        return {
            "dimensions": {
                k: {"yes": v.yes, "total": v.total, "flagged": v.flagged, "score": v.score}
                for k, v in self.dimensions.items()
            },
            "average": self.average,
            "answers": list(self.answers),
        }


class UnreliableJudgeError(Exception):
    pass


def _parse_answer(text: str) -> bool | None:
    obj = extract_json(text, dict)
    if obj is None:
        return None
    answer = obj.get("answer")
    if not isinstance(answer, str):
        return None
    answer = answer.strip().lower()
    if answer in ("yes", "no"):
        return answer == "yes"
    return None


def _judge(backend: LlmBackend, turns: list[ChatTurn]) -> tuple[str | None, bool]:
    """One judge call with one transport retry; returns (text, transport_failed)."""
    for _ in range(2):
        try:
            return backend.complete(turns), False
        except TransportError as exc:
            log.warning("judge call failed: %s", exc)
    return None, True


def sure_score(report: IncidentReport | str, checklist: SureChecklist, backend: LlmBackend) -> SureResult:
    """Ask the judge every checklist question; a dimension scores 1 + 4 * yes / total."""
    report_text = report if isinstance(report, str) else report.render_text()
    system = ChatTurn("system", render("sure_system"))
    answers = []
    failures = 0
    total_questions = sum(len(q) for q in checklist.questions.values())
    dims = {}
    for dim in SURE_DIMENSIONS:
        yes = flagged = 0
        for question in checklist.questions[dim]:
            turns = [system, ChatTurn("user", render("sure_user", dimension=dim, report=report_text, question=question))]
            text, failed = _judge(backend, turns)
            verdict = None if failed else _parse_answer(text)
            if not failed and verdict is None:
                repair = turns + [ChatTurn("assistant", text or "(empty reply)"), ChatTurn("user", render("sure_repair"))]
                text, failed = _judge(backend, repair)
                verdict = None if failed else _parse_answer(text)
            failures += failed
            if verdict is None:
                flagged += 1
            yes += bool(verdict)
            answers.append({"dimension": dim, "question": question, "answer": verdict,
                            "flagged": verdict is None, "transport_failure": failed})
        dims[dim] = DimensionScore(yes, len(checklist.questions[dim]), flagged)
    if failures * 2 > total_questions:
        raise UnreliableJudgeError(f"judge transport failed on {failures} of {total_questions} questions")
    return SureResult(dims, tuple(answers))
