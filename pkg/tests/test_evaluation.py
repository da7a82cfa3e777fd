import csv
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from incident_rca.agents import CallbackBackend, ScriptedBackend, TransportError
from incident_rca.evaluation import (
    ChecklistError,
    EvalRecord,
    SureChecklist,
    UnreliableJudgeError,
    acc_at_k,
    avg_at_k,
    evaluate_suite,
    sure_score,
)
from incident_rca.model import DataError, FaultType, Ranking

NAMES = ["a", "b", "c", "d", "e", "f"]


def record(position, case_id="x", fault=None):
    """Record whose truth sits at 1-based ``position``; None means absent."""
    ranking = Ranking.from_scores({n: 1 - i / 10 for i, n in enumerate(NAMES)})
    truth = NAMES[position - 1] if position else "zz"
    return EvalRecord(case_id, ranking, truth, fault)


def test_acc_basics():
    assert acc_at_k([record(1)], 1) == 1.0
    assert acc_at_k([record(None)], 5) == 0.0
    assert acc_at_k([record(1)] * 38 + [record(2)] * 52, 1) == pytest.approx(0.4222, abs=1e-4)


def test_avg_basics():
    assert avg_at_k([record(2)], 3) == pytest.approx(0.6667, abs=1e-4)
    assert all(avg_at_k([record(1)] * 4, k) == 1.0 for k in (1, 3, 5))
    assert avg_at_k([record(4)], 3) == 0.0


positions = st.lists(st.one_of(st.none(), st.integers(1, 6)), min_size=1, max_size=20)


@given(positions)
def test_metric_properties(pos):
    records = [record(p) for p in pos]
    accs = [acc_at_k(records, k) for k in range(1, 7)]
    assert accs == sorted(accs)
    assert avg_at_k(records, 1) == acc_at_k(records, 1)
    for k in range(1, 7):
        brute = sum(sum(1 for p in pos if p is not None and p <= j) / len(pos) for j in range(1, k + 1)) / k
        assert avg_at_k(records, k) == pytest.approx(brute, abs=1e-12)


def write_suite(tmp_path, rows, missing_truth=()):
    preds = []
    for case_id, fault, truth, ranking in rows:
        d = tmp_path / case_id
        d.mkdir()
        manifest = {"case_id": case_id, "ground_truth_fault": fault}
        if case_id not in missing_truth:
            manifest["ground_truth_service"] = truth
        (d / "manifest.json").write_text(json.dumps(manifest))
        preds.append({"case_id": case_id, "ranking": [{"candidate": c, "score": 1 - i / 10} for i, c in enumerate(ranking)]})
    (tmp_path / "predictions.json").write_text(json.dumps(preds))
    return tmp_path


def test_perfect_suite(tmp_path):
    rows = [(f"c{i}", ft.value, "a", ["a", "b"]) for i, ft in enumerate(FaultType)]
    summary = evaluate_suite(write_suite(tmp_path, rows), out_dir=tmp_path / "out")
    assert summary.overall.ac1 == 1.0
    assert all(s.ac1 == s.avg3 == s.avg5 == 1.0 for s in summary.per_fault.values())
    assert len(summary.per_fault) == 6
    header, row = list(csv.reader((tmp_path / "out" / "summary.csv").open()))
    assert header[:4] == ["n", "AC@1", "Avg@3", "Avg@5"] and row[1] == "100.00"
    assert json.loads((tmp_path / "out" / "summary.json").read_text())["overall"]["n"] == 6


def test_ninety_case_table(tmp_path):
    # per fault type: 15 cases; hits at position 1 for the first h cases, position 3 for the next 5, absent otherwise
    hits = {"CPU": 10, "DELAY": 6, "DISK": 8, "LOSS": 4, "MEM": 7, "SOCKET": 3}
    rows = []
    for ft, h in hits.items():
        for i in range(15):
            ranking = ["a", "b", "c", "d", "e"]
            truth = "a" if i < h else ("c" if i < h + 5 else "zz")
            rows.append((f"{ft}-{i:02d}", ft, truth, ranking))
    summary = evaluate_suite(write_suite(tmp_path, rows))
    assert summary.n == 90
    assert summary.overall.ac1 == pytest.approx(38 / 90)
    cpu = summary.per_fault["CPU"]
    assert cpu.ac1 == pytest.approx(10 / 15)
    assert cpu.avg3 == pytest.approx((10 / 15 + 10 / 15 + 15 / 15) / 3)
    assert cpu.avg5 == pytest.approx((10 + 10 + 15 + 15 + 15) / 15 / 5)


def test_missing_truth_is_an_error(tmp_path):
    rows = [("c1", "CPU", "a", ["a"]), ("c2", "MEM", "b", ["b"])]
    with pytest.raises(DataError, match="c2"):
        evaluate_suite(write_suite(tmp_path, rows, missing_truth={"c2"}))


def judge(yes_for):
    """Answers yes for the questions whose text appears in ``yes_for``."""
    def reply(turns):
        text = turns[-1].text
        return json.dumps({"answer": "yes" if any(q in text for q in yes_for) else "no"})
    return CallbackBackend(reply)


TEN = SureChecklist({
    "CausalSoundness": tuple(f"cs question {i}?" for i in range(10)),
    "Actionability": ("act?",),
    "IncidentSpecificity": ("spec?",),
    "Clarity": ("clear?",),
})


def test_sure_endpoints_and_ratio():
    assert sure_score("report", TEN, judge(["?"])).dimensions["CausalSoundness"].score == 5.0
    assert sure_score("report", TEN, judge([])).dimensions["CausalSoundness"].score == 1.0
    seven = sure_score("report", TEN, judge([f"cs question {i}?" for i in range(7)]))
    assert seven.dimensions["CausalSoundness"].score == 3.8
    assert seven.average == pytest.approx((3.8 + 1 + 1 + 1) / 4)


def test_default_checklist_loads():
    checklist = SureChecklist.default()
    assert set(checklist.questions) == {"CausalSoundness", "Actionability", "IncidentSpecificity", "Clarity"}
    result = sure_score("report", checklist, judge(["?"]))
    assert result.average == 5.0


def test_checklist_validation():
    with pytest.raises(ChecklistError):
        SureChecklist.from_json({"CausalSoundness": ["q"]})


def test_unparseable_answers_count_as_no_and_are_flagged():
    result = sure_score("r", TEN, CallbackBackend(lambda turns: "maybe?"))
    assert result.dimensions["Clarity"].flagged == 1
    assert result.dimensions["Clarity"].score == 1.0


def test_repair_prompt_recovers_answer():
    replies = iter(["uh", '{"answer": "yes"}'] * 20)
    result = sure_score("r", TEN, CallbackBackend(lambda turns: next(replies)))
    assert result.average == 5.0


def test_unreliable_judge():
    def broken(turns):
        raise TransportError("down")
    with pytest.raises(UnreliableJudgeError):
        sure_score("r", TEN, CallbackBackend(broken))
    # a single failing question is tolerated
    script = [{"error": "x"}, {"error": "x"}] + [{"text": '{"answer": "yes"}'}] * 12
    assert sure_score("r", TEN, ScriptedBackend(script)).dimensions["CausalSoundness"].yes == 9
