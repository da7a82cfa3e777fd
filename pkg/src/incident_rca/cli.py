"""``rca`` command line: rank, diagnose, evaluate, sure, gen-fixture.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 model backend failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .agents.backends import HttpChatBackend, LlmBackend, ScriptedBackend, TransportError
from .agents.workflow import IncidentReport, WorkflowAborted, run_workflow, write_transcript
from .config import Config, ConfigError, load_config
from .evaluation import ChecklistError, SureChecklist, UnreliableJudgeError, evaluate_suite, sure_score
from .fixtures import FaultSpec, Topology, TopologyError, gen_case
from .ingestion import load_case, load_external_ranking
from .metrics_rca import metrics_rank
from .model import DataError, RankingError
from .twist import twist_rank

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3

log = logging.getLogger("incident_rca")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2 by default
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="seed for log sampling and fixture generation")
    common.add_argument("--backend", choices=("http-chat", "scripted"))
    common.add_argument("--script", help="JSONL reply script for the scripted backend")
    common.add_argument("--max-iters", type=int, dest="max_iters")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="rca", description="Multi-source root cause analysis for microservice incidents.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("rank", parents=[common], help="print the metrics and trace rankings as JSON")
    p.add_argument("case", help="case directory or manifest.json")

    p = sub.add_parser("diagnose", parents=[common], help="run the agent workflow and write a report")
    p.add_argument("case", help="case directory or manifest.json")
    p.add_argument("--metrics-ranking", help="JSON ranking from an external metrics-based ranker")

    p = sub.add_parser("evaluate", parents=[common], help="score predictions against a case suite")
    p.add_argument("suite", help="directory of case directories")
    p.add_argument("--predictions", help="predictions JSON (default: <suite>/predictions.json)")

    p = sub.add_parser("sure", parents=[common], help="checklist-score a report with a judge model")
    p.add_argument("report", help="report.json or a plain-text report")
    p.add_argument("checklist", nargs="?", help="checklist JSON (default: bundled checklist)")

    p = sub.add_parser("gen-fixture", parents=[common], help="generate a synthetic incident case")
    p.add_argument("spec", help="fault spec JSON: target, fault_type, magnitude, onset_us, seed")
    p.add_argument("--topology", help="topology JSON (default: 8-service demo shop)")
    return parser


def _config(args) -> Config:
    overrides: dict[str, str] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["diag.seed"] = str(args.seed)
    if args.max_iters is not None:
        overrides["agents.max_iterations"] = str(args.max_iters)
    if args.backend:
        overrides["cli.backend"] = args.backend
    if args.script:
        overrides["cli.script"] = args.script
    if args.out:
        overrides["cli.out"] = args.out
    return load_config(args.config, overrides)


def _backend(config: Config) -> LlmBackend:
    if config.cli.backend == "scripted":
        if not config.cli.script:
            raise UsageError("the scripted backend needs --script")
        return ScriptedBackend.from_jsonl(config.cli.script, vision=config.agents.vision)
    if config.cli.backend == "http-chat":
        return HttpChatBackend(
            endpoint=config.agents.endpoint,
            model=config.agents.model,
            temperature=config.agents.temperature,
            vision=config.agents.vision,
        )
    raise UsageError(f"unknown backend {config.cli.backend!r}")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_rank(args, config: Config) -> int:
    case = load_case(args.case, config.pod_pattern or None)
    result = {
        "case_id": case.case_id,
        "metrics_ranking": metrics_rank(case, config.metrics).to_json(),
        "trace_ranking": twist_rank(case, config.twist).to_json(),
    }
    _emit(result)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "rankings.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_diagnose(args, config: Config) -> int:
    case = load_case(args.case, config.pod_pattern or None)
    backend = _backend(config)
    r_metrics = load_external_ranking(args.metrics_ranking) if args.metrics_ranking else metrics_rank(case, config.metrics)
    r_trace = twist_rank(case, config.twist)
    out = Path(config.cli.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        report = run_workflow(case, r_metrics, r_trace, backend, config)
    except WorkflowAborted as exc:
        write_transcript(exc.transcript, out / "transcript.jsonl")
        raise
    write_transcript(report.transcript, out / "transcript.jsonl")
    report = replace(report, transcript_ref="transcript.jsonl")
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    text = report.render_text()
    (out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_evaluate(args, config: Config) -> int:
    summary = evaluate_suite(args.suite, args.predictions, args.out)
    _emit(summary.to_json())
    return EXIT_OK


def cmd_sure(args, config: Config) -> int:
    path = Path(args.report)
    raw = path.read_text(encoding="utf-8")
    report: IncidentReport | str = raw
    if path.suffix == ".json":
        try:
            report = IncidentReport.from_json(json.loads(raw))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: not a report JSON ({exc})") from None
    checklist = SureChecklist.load(args.checklist) if args.checklist else SureChecklist.default()
    result = sure_score(report, checklist, _backend(config))
    _emit(result.to_json())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sure.json").write_text(json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gen_fixture(args, config: Config) -> int:
    try:
        obj = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        spec = FaultSpec.from_json(obj)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DataError(f"{args.spec}: invalid fault spec ({exc})") from None
    if args.seed is not None:
        spec = FaultSpec(spec.target, spec.fault_type, spec.magnitude, spec.onset, args.seed, spec.case_id)
    topology = None
    if args.topology:
        topology = Topology.from_json(json.loads(Path(args.topology).read_text(encoding="utf-8")))
    manifest = gen_case(spec, topology, args.out or config.cli.out)
    sys.stdout.write(f"{manifest}\n")
    return EXIT_OK


_COMMANDS = {
    "rank": cmd_rank,
    "diagnose": cmd_diagnose,
    "evaluate": cmd_evaluate,
    "sure": cmd_sure,
    "gen-fixture": cmd_gen_fixture,
}


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        config = _config(args)
        return _COMMANDS[args.command](args, config)
    except (UsageError, ConfigError) as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except (DataError, RankingError, TopologyError, ChecklistError, json.JSONDecodeError,
            FileNotFoundError, IsADirectoryError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except (TransportError, WorkflowAborted, UnreliableJudgeError) as exc:
        sys.stderr.write(f"backend failure: {exc}\n")
        return EXIT_BACKEND


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
