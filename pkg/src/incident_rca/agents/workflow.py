"""Iterative re-ranking loop, deep-dive summaries and the final incident report."""

from __future__ import annotations

import base64
import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from ..config import Config
from ..diagnostics import DependencySubgraph, DiagnosticBundle, build_bundle, extract_subgraph, service_call_graph
from ..ingestion import ranking_from_json
from ..model import IncidentCase, Ranking, RankingError, fuse_rankings
from .backends import ChatTurn, LlmBackend, TransportError
from .prompts import PROMPT_VERSION, extract_json, format_ranking, render

log = logging.getLogger(__name__)

FINISH = "Finish"
ANALYZE_NEXT = "AnalyzeNext"


class WorkflowAborted(Exception):
    def __init__(self, message: str, transcript: list["Exchange"]):
        super().__init__(message)
        self.transcript = transcript


class ReplyError(ValueError):
    """A model reply did not satisfy the requested schema."""


@dataclass(frozen=True)
class Exchange:
    index: int
    agent: str
    request: tuple[ChatTurn, ...]
    response: str | None = None
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "agent": self.agent,
            "request": [t.to_json() for t in self.request],
            "response": self.response,
            "error": self.error,
        }


@dataclass(frozen=True)
class AgentDecision:
    kind: str
    ranking: Ranking
    reasoning: str = ""
    target: str | None = None
    fallback: bool = False

    def __post_init__(self) -> None:
        if self.kind not in (FINISH, ANALYZE_NEXT):
            raise ValueError(f"unknown decision {self.kind!r}")
        if self.kind == ANALYZE_NEXT and self.target not in self.ranking.candidates:
            raise ValueError(f"AnalyzeNext target {self.target!r} is not in the ranking")


@dataclass(frozen=True)
class PodSummary:
    pod: str
    text: str
    iteration: int


@dataclass
class WorkflowState:
    case_id: str
    r_metrics: Ranking
    r_trace: Ranking
    ranking: Ranking
    max_iterations: int = 6
    visited: list[str] = field(default_factory=list)
    summaries: list[PodSummary] = field(default_factory=list)
    iteration: int = 0
    transcript: list[Exchange] = field(default_factory=list)

    def next_unvisited(self, allowed: set[str] | None = None) -> str | None:
        for c in self.ranking.candidates:
            if c not in self.visited and (allowed is None or c in allowed):
                return c
        return None


@dataclass(frozen=True)
class Action:
    step: str
    impact: str


@dataclass(frozen=True)
class IncidentReport:
    case_id: str
    ranking: Ranking
    confidence: dict[str, str]
    summary: str
    actions: tuple[Action, ...]
    degraded: bool = False
    iterations: int = 0
    visited: tuple[str, ...] = ()
    transcript_ref: str | None = None
    prompt_version: str = PROMPT_VERSION
    transcript: tuple[Exchange, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.summary.strip() and not self.actions:
            raise ValueError("a report with a summary needs at least one action")

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "ranking": [
                {**row, "confidence": self.confidence.get(row["candidate"])}
                for row in self.ranking.to_json()
            ],
            "summary": self.summary,
            "actions": [{"step": a.step, "impact": a.impact} for a in self.actions],
            "degraded": self.degraded,
            "iterations": self.iterations,
            "visited": list(self.visited),
            "transcript": self.transcript_ref,
            "prompt_version": self.prompt_version,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "IncidentReport":
        ranking = ranking_from_json(
            [{"candidate": r["candidate"], "score": r["score"], "rationale": r.get("rationale")}
             for r in obj["ranking"]]
        ) if obj.get("ranking") else Ranking(())
        return cls(
            case_id=obj.get("case_id", ""),
            ranking=ranking,
            confidence={r["candidate"]: r["confidence"] for r in obj.get("ranking", []) if r.get("confidence")},
            summary=obj.get("summary", ""),
            actions=tuple(Action(a["step"], a.get("impact", "")) for a in obj.get("actions", [])),
            degraded=bool(obj.get("degraded", False)),
            iterations=int(obj.get("iterations", 0)),
            visited=tuple(obj.get("visited", [])),
            transcript_ref=obj.get("transcript"),
        )

    def render_text(self) -> str:
        lines = [f"INCIDENT REPORT: {self.case_id}", ""]
        lines.append("1. FINAL ROOT-CAUSE RANKING")
        for i, e in enumerate(self.ranking.entries, 1):
            conf = self.confidence.get(e.candidate)
            lines.append(f"  {i}. {e.candidate}  score={e.score:.4f}" + (f"  confidence: {conf}" if conf else ""))
        lines += ["", "2. INCIDENT SUMMARY", self.summary or "(none)", ""]
        lines.append("3. RECOMMENDED ACTIONS (highest priority first)")
        for i, a in enumerate(self.actions, 1):
            lines.append(f"  {i}. {a.step}")
            if a.impact:
                lines.append(f"     expected impact: {a.impact}")
        if self.degraded:
            lines += ["", "NOTE: generated from templates because the remediation model reply was unusable."]
        return "\n".join(lines) + "\n"


def _call(state: WorkflowState, backend: LlmBackend, agent: str, turns: Sequence[ChatTurn]) -> str:
    """One backend call with a single retry on transport failure; every attempt is recorded."""
    last_error = None
    for attempt in range(2):
        request = tuple(turns)
        try:
            text = backend.complete(request)
        except TransportError as exc:
            last_error = str(exc)
            state.transcript.append(Exchange(len(state.transcript), agent, request, error=last_error))
            log.warning("%s call failed (attempt %d): %s", agent, attempt + 1, exc)
            continue
        state.transcript.append(Exchange(len(state.transcript), agent, request, response=text))
        return text
    raise WorkflowAborted(f"{agent}: backend failed twice: {last_error}", state.transcript)


def _clean_name(name) -> str:
    if not isinstance(name, str) or not name.strip():
        raise ReplyError("candidate names must be non-empty strings")
    return name.strip().lower()


def parse_decision(text: str, current: Ranking) -> AgentDecision:
    obj = extract_json(text, dict)
    if obj is None:
        raise ReplyError("no JSON object found")
    raw_kind = str(obj.get("decision", "")).replace(" ", "").replace("_", "").lower()
    if raw_kind == "finish":
        kind = FINISH
    elif raw_kind == "analyzenext":
        kind = ANALYZE_NEXT
    else:
        raise ReplyError(f"decision must be AnalyzeNext or Finish, got {obj.get('decision')!r}")

    ranking = current
    if obj.get("ranking") is not None:
        rows = obj["ranking"]
        if not isinstance(rows, list):
            raise ReplyError("ranking must be a list")
        try:
            cleaned = [
                {"candidate": _clean_name(r.get("candidate")), "score": r.get("score"),
                 "rationale": r.get("rationale") if isinstance(r.get("rationale"), str) else None}
                for r in rows
                if isinstance(r, dict)
            ]
            if len(cleaned) != len(rows):
                raise ReplyError("ranking entries must be objects")
            ranking = ranking_from_json(cleaned, "ranking")
        except RankingError as exc:
            raise ReplyError(str(exc)) from None

    target = None
    if kind == ANALYZE_NEXT:
        target = _clean_name(obj.get("target"))
        if target not in ranking.candidates:
            raise ReplyError(f"target {target!r} does not appear in the ranking")
    reasoning = obj.get("reasoning")
    return AgentDecision(kind, ranking, reasoning if isinstance(reasoning, str) else "", target)


def _with_repair(state, backend, agent, turns, parse, repair_template):
    """Call, parse, and on failure send one repair prompt. Returns (value, error)."""
    text = _call(state, backend, agent, turns)
    try:
        return parse(text), None
    except ReplyError as exc:
        first_error = str(exc)
    repair = list(turns) + [
        ChatTurn("assistant", text or "(empty reply)"),
        ChatTurn("user", render(repair_template, error=first_error)),
    ]
    text = _call(state, backend, f"{agent}-repair", repair)
    try:
        return parse(text), None
    except ReplyError as exc:
        return None, str(exc)


def rerank_step(
    state: WorkflowState,
    r_metrics: Ranking,
    r_trace: Ranking,
    latest_summary: PodSummary | None,
    subgraph_context: DependencySubgraph | str | None,
    backend: LlmBackend,
) -> AgentDecision:
    if isinstance(subgraph_context, DependencySubgraph):
        context = subgraph_context.text()
    else:
        context = subgraph_context or "(none)"
    summary_text = (
        f"[{latest_summary.pod}, iteration {latest_summary.iteration}] {latest_summary.text}"
        if latest_summary
        else "(no deep dive performed yet)"
    )
    turns = [
        ChatTurn("system", render("rerank_system")),
        ChatTurn(
            "user",
            render(
                "rerank_user",
                case_id=state.case_id,
                iteration=state.iteration + 1,
                max_iterations=state.max_iterations,
                visited=", ".join(state.visited) or "none",
                metrics_ranking=format_ranking(r_metrics),
                trace_ranking=format_ranking(r_trace),
                current_ranking=format_ranking(state.ranking),
                subgraph=context,
                latest_summary=summary_text,
            ),
        ),
    ]
    decision, error = _with_repair(
        state, backend, "rerank", turns, lambda t: parse_decision(t, state.ranking), "rerank_repair"
    )
    if decision is None:
        log.warning("rerank reply unusable after repair (%s); falling back", error)
        target = state.next_unvisited()
        if target is None:
            return AgentDecision(FINISH, state.ranking, f"fallback: {error}", fallback=True)
        return AgentDecision(ANALYZE_NEXT, state.ranking, f"fallback: {error}", target, fallback=True)
    state.ranking = decision.ranking
    return decision


def deep_dive_step(
    state: WorkflowState,
    pod: str,
    bundle: DiagnosticBundle,
    backend: LlmBackend,
) -> PodSummary:
    position = state.ranking.position(pod)
    text = render(
        "deep_dive_user",
        case_id=state.case_id,
        pod=pod,
        position=position if position is not None else "not ranked",
        bundle=bundle.text(),
    )
    images: tuple[tuple[str, str], ...] = ()
    if backend.capabilities.vision and bundle.chart is not None:
        images = (("image/png", base64.b64encode(bundle.chart).decode("ascii")),)
    turns = [ChatTurn("system", render("deep_dive_system")), ChatTurn("user", text, images)]
    reply = _call(state, backend, "deep_dive", turns).strip()
    summary = PodSummary(pod, reply or "(the model returned an empty summary)", state.iteration)
    state.summaries.append(summary)
    return summary


def parse_remediation(text: str) -> tuple[str, tuple[Action, ...], dict[str, str]]:
    obj = extract_json(text, dict)
    if obj is None:
        raise ReplyError("no JSON object found")
    summary = obj.get("summary")
    if not isinstance(summary, str) or not summary.strip():
        raise ReplyError("summary must be a non-empty string")
    raw_actions = obj.get("actions")
    if not isinstance(raw_actions, list) or not raw_actions:
        raise ReplyError("actions must be a non-empty list")
    actions = []
    for a in raw_actions:
        if not isinstance(a, dict) or not isinstance(a.get("step"), str) or not a["step"].strip():
            raise ReplyError("each action needs a non-empty step")
        impact = a.get("impact", "")
        actions.append(Action(a["step"], impact if isinstance(impact, str) else json.dumps(impact)))
    confidence = {}
    for c in obj.get("confidence") or []:
        if isinstance(c, dict) and isinstance(c.get("candidate"), str):
            confidence[c["candidate"].strip().lower()] = str(c.get("confidence", ""))
    return summary, tuple(actions), confidence


def templated_report(state: WorkflowState) -> IncidentReport:
    """Deterministic report assembled without a model reply."""
    ranking = state.ranking
    top = ranking.entries[0] if ranking.entries else None
    if state.summaries:
        parts = [f"Automated summary assembled from {len(state.summaries)} deep-dive analyses."]
        parts += [f"[iteration {s.iteration}] {s.pod}: {s.text}" for s in state.summaries]
        summary = "\n".join(parts)
    else:
        def head(r: Ranking) -> str:
            return f"{r.entries[0].candidate} (score {r.entries[0].score:.4f})" if r.entries else "no candidate"

        summary = (
            "No service was analyzed in depth. "
            f"The metrics-based ranking places {head(state.r_metrics)} first; "
            f"the trace-based ranking places {head(state.r_trace)} first. "
            + (f"The current top candidate is {top.candidate}." if top else "No candidate is available.")
        )
    actions = tuple(
        Action(
            f"Inspect {e.candidate}: check recent deployments, resource limits and error logs, "
            "and roll back or scale the service if it is degraded.",
            f"addresses candidate ranked {i} (score {e.score:.4f})",
        )
        for i, e in enumerate(ranking.entries[:3], 1)
    ) or (Action("Collect more telemetry for the incident window and rerun the analysis.", "unknown"),)
    confidence = {e.candidate: f"heuristic score {e.score:.4f}" for e in ranking.entries}
    return IncidentReport(
        state.case_id, ranking, confidence, summary, actions, degraded=True,
        iterations=state.iteration, visited=tuple(state.visited),
    )


def remediation_step(state: WorkflowState, backend: LlmBackend) -> IncidentReport:
    summaries = "\n\n".join(
        f"[iteration {s.iteration}] {s.pod}:\n{s.text}" for s in state.summaries
    ) or "(no deep-dive analysis was performed)"
    turns = [
        ChatTurn("system", render("remediation_system")),
        ChatTurn(
            "user",
            render(
                "remediation_user",
                case_id=state.case_id,
                current_ranking=format_ranking(state.ranking),
                summaries=summaries,
            ),
        ),
    ]
    try:
        parsed, error = _with_repair(state, backend, "remediation", turns, parse_remediation, "remediation_repair")
    except WorkflowAborted as exc:
        log.warning("remediation backend failed; emitting templated report: %s", exc)
        return templated_report(state)
    if parsed is None:
        log.warning("remediation reply unusable after repair (%s)", error)
        return templated_report(state)
    summary, actions, confidence = parsed
    return IncidentReport(
        state.case_id, state.ranking, confidence, summary, actions,
        iterations=state.iteration, visited=tuple(state.visited),
    )


def seed_ranking(r_metrics: Ranking, r_trace: Ranking, how: str) -> Ranking:
    if how == "fused":
        return fuse_rankings(r_metrics, r_trace)
    if not r_metrics.entries:
        return r_trace
    return r_metrics


def run_workflow(
    case: IncidentCase,
    r_metrics: Ranking,
    r_trace: Ranking,
    backend: LlmBackend,
    config: Config | None = None,
) -> IncidentReport:
    """Rerank / deep-dive loop until Finish or the iteration cap, then remediation.

    The returned report carries the full call transcript.
    """
    config = config or Config()
    state = WorkflowState(
        case_id=case.case_id,
        r_metrics=r_metrics,
        r_trace=r_trace,
        ranking=seed_ranking(r_metrics, r_trace, config.agents.seed_ranking),
        max_iterations=config.agents.max_iterations,
    )
    known = set(case.services())
    calls = service_call_graph(case)
    revisits: Counter = Counter()
    latest: PodSummary | None = None

    while state.iteration < state.max_iterations:
        focus = latest.pod if latest else (state.ranking.entries[0].candidate if state.ranking.entries else None)
        context = extract_subgraph(case, focus, calls) if focus else None
        decision = rerank_step(state, r_metrics, r_trace, latest, context, backend)
        if decision.kind == FINISH:
            break
        target = decision.target
        if target in state.visited:
            if revisits[target] >= 1:
                target = state.next_unvisited(known)
            else:
                revisits[target] += 1
        elif target not in known:
            log.info("agent target %r is not part of the case; substituting", target)
            target = state.next_unvisited(known)
        if target is None:
            break
        bundle = build_bundle(case, target, config.diag, calls, render_chart=backend.capabilities.vision)
        latest = deep_dive_step(state, target, bundle, backend)
        if target not in state.visited:
            state.visited.append(target)
        state.iteration += 1

    report = remediation_step(state, backend)
    return replace(report, transcript=tuple(state.transcript))


def write_transcript(transcript: Sequence[Exchange], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in transcript:
            fh.write(json.dumps(ex.to_json(), sort_keys=True) + "\n")
