import json

import pytest

from helpers import REMEDIATION, rerank
from incident_rca.cli import run_cli


@pytest.fixture(scope="module")
def case_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps({"target": "cart", "fault_type": "MEM", "seed": 7}))
    assert run_cli(["gen-fixture", str(spec), "--out", str(root / "case")]) == 0
    return root / "case"


def write_script(path, replies):
    path.write_text("".join(json.dumps(r if isinstance(r, dict) else {"text": r}) + "\n" for r in replies))
    return path


def test_rank_prints_two_rankings(case_dir, capsys):
    assert run_cli(["rank", str(case_dir)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert {"metrics_ranking", "trace_ranking"} <= set(out)
    assert out["metrics_ranking"] and out["trace_ranking"]


def test_diagnose_is_deterministic(case_dir, tmp_path, capsys):
    script = write_script(tmp_path / "s.jsonl", [rerank("AnalyzeNext", target="cart"), "memory grows", rerank("Finish"), REMEDIATION])
    for name in ("a", "b"):
        argv = ["diagnose", str(case_dir), "--backend", "scripted", "--script", str(script), "--out", str(tmp_path / name)]
        assert run_cli(argv) == 0
    for f in ("report.json", "report.txt", "transcript.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["visited"] == ["cart"] and report["transcript"] == "transcript.jsonl"
    text = (tmp_path / "a" / "report.txt").read_text()
    assert text.index("1. FINAL") < text.index("2. INCIDENT SUMMARY") < text.index("3. RECOMMENDED ACTIONS")
    assert len((tmp_path / "a" / "transcript.jsonl").read_text().splitlines()) == 4


def test_config_file_and_max_iters(case_dir, tmp_path):
    cfg = tmp_path / "rca.conf"
    cfg.write_text("# limit the loop\nagents.max_iterations = 2\ndiag.log_cap = 50\n")
    script = write_script(tmp_path / "s.jsonl", [rerank("AnalyzeNext", target="cart"), "x",
                                                 rerank("AnalyzeNext", target="email"), "y", REMEDIATION])
    argv = ["diagnose", str(case_dir), "--config", str(cfg), "--backend", "scripted", "--script", str(script),
            "--out", str(tmp_path / "o")]
    assert run_cli(argv) == 0
    assert json.loads((tmp_path / "o" / "report.json").read_text())["iterations"] == 2
    # the flag wins over the file; remediation then receives a rerank reply and degrades to the template
    assert run_cli(argv + ["--max-iters", "1"]) == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["iterations"] == 1 and report["degraded"]


def test_external_metrics_ranking(case_dir, tmp_path):
    ext = tmp_path / "ext.json"
    ext.write_text(json.dumps([{"candidate": "email", "score": 5}, {"candidate": "cart", "score": 1}]))
    script = write_script(tmp_path / "s.jsonl", [rerank("Finish"), REMEDIATION])
    argv = ["diagnose", str(case_dir), "--metrics-ranking", str(ext), "--backend", "scripted",
            "--script", str(script), "--out", str(tmp_path / "o")]
    assert run_cli(argv) == 0
    transcript = (tmp_path / "o" / "transcript.jsonl").read_text()
    assert "1. email (score 1.0000)" in transcript


@pytest.mark.parametrize(
    "argv, code",
    [
        (["rank", "x", "--bogus"], 1),
        (["frobnicate"], 1),
        (["rank", "x", "--set", "twist.nope=1"], 1),
        (["rank", "/nonexistent"], 2),
    ],
)
def test_exit_codes(argv, code, capsys):
    assert run_cli(argv) == code
    if code == 1 and "--bogus" in argv:
        assert "usage:" in capsys.readouterr().err


def test_backend_failure_exit_code(case_dir, tmp_path):
    script = write_script(tmp_path / "s.jsonl", [{"error": "down"}, {"error": "down"}])
    argv = ["diagnose", str(case_dir), "--backend", "scripted", "--script", str(script), "--out", str(tmp_path / "o")]
    assert run_cli(argv) == 3
    assert len((tmp_path / "o" / "transcript.jsonl").read_text().splitlines()) == 2


def test_evaluate_and_sure(case_dir, tmp_path, capsys):
    suite = tmp_path / "suite"
    suite.mkdir()
    (suite / "case").symlink_to(case_dir)
    (suite / "predictions.json").write_text(json.dumps([{"case_id": "cart-mem-s7", "ranking": [{"candidate": "cart", "score": 1}]}]))
    assert run_cli(["evaluate", str(suite), "--out", str(tmp_path / "ev")]) == 0
    assert json.loads(capsys.readouterr().out)["overall"]["ac1"] == 1.0

    report = tmp_path / "report.txt"
    report.write_text("1. cart\n2. summary\n3. restart cart\n")
    answers = write_script(tmp_path / "j.jsonl", ['{"answer": "yes"}'] * 18)
    assert run_cli(["sure", str(report), "--backend", "scripted", "--script", str(answers)]) == 0
    assert json.loads(capsys.readouterr().out)["average"] == 5.0


def test_seed_overrides_fixture_spec(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"target": "cart", "fault_type": "CPU", "seed": 1}))
    run_cli(["gen-fixture", str(spec), "--out", str(tmp_path / "a"), "--seed", "9"])
    run_cli(["gen-fixture", str(spec), "--out", str(tmp_path / "b")])
    assert json.loads((tmp_path / "a" / "fault.json").read_text())["seed"] == 9
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()
    assert run_cli(["gen-fixture", str(spec), "--out", str(tmp_path / "c"), "--topology", str(spec)]) == 2
