import asyncio
import json
from collections import Counter

import pytest

from decision_layer.trace_log import read_traces
from driver import main


def _main(*argv):
    return asyncio.run(main(list(argv)))


def test_gen_scenarios(tmp_path):
    out = tmp_path / "scenarios.json"
    assert _main("gen-scenarios", "--out", str(out)) == 0
    doc = json.loads(out.read_text(encoding="utf-8"))
    assert [item["id"] for item in doc][:2] == ["k0", "k1-absent"]


def test_sweep_fixture_csv(tmp_path):
    out = tmp_path / "sweep.csv"
    assert _main("sweep", "--fixture", "--tau-grid", "0.8", "--alpha-grid", "0.4", "--format", "csv", "--out", str(out)) == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "Bucket,alpha,tau,n,Succ.,RR"
    assert lines[1:] == ["easy,0.40,0.80,50,100%,0.84", "medium,0.40,0.80,50,88%,1.62", "hard,0.40,0.80,50,18%,1.84"]


def test_attribute_fixture(tmp_path):
    out = tmp_path / "attribution.csv"
    assert _main("attribute", "--fixture", "--format", "csv", "--out", str(out)) == 0
    rows = out.read_text(encoding="utf-8").splitlines()
    assert rows == ["Category,Count", "early_stop_llm,1", "early_stop_both,6", "corpus_gap,40"]


def test_run_then_report(tmp_path):
    log_file = tmp_path / "run_log.csv"
    assert _main("run", "calendar", "--runs", "1", "--out", str(tmp_path), "--log-file", str(log_file)) == 0
    assert log_file.exists()
    traces = tmp_path / "traces" / "calendar_dc.jsonl"
    report = tmp_path / "again.md"
    assert _main("report", "--traces", str(traces), "--out", str(report)) == 0
    assert report.read_text(encoding="utf-8") == (tmp_path / "calendar_dc.md").read_text(encoding="utf-8")


def test_bad_config_value_exits_nonzero(tmp_path, capsys):
    assert _main("run", "retrieval", "--tau", "1.5", "--out", str(tmp_path), "--log-file", str(tmp_path / "log.csv")) == 1
    assert "[Driver] Error" in capsys.readouterr().err


def test_missing_trace_file(tmp_path):
    assert _main("report", "--traces", str(tmp_path / "nope.jsonl")) == 1


def test_run_calendar_with_extractor_noise(tmp_path):
    assert _main(
        "run", "calendar", "--runs", "1", "--noise-fn", "0.2", "--noise-fp", "0.0",
        "--out", str(tmp_path), "--log-file", str(tmp_path / "log.csv"),
    ) == 0
    traces = read_traces(str(tmp_path / "traces" / "calendar_dc.jsonl"))
    assert len(traces) == 8
    assert all(t.tags["noise_fn"] == 0.2 and t.tags["noise_fp"] == 0.0 for t in traces)


def test_run_retrieval_on_synthesized_corpus(tmp_path):
    assert _main(
        "run", "retrieval", "--synth", "2,2,2", "--runs", "1",
        "--out", str(tmp_path), "--log-file", str(tmp_path / "log.csv"),
    ) == 0
    traces = read_traces(str(tmp_path / "traces" / "retrieval_dc_composite.jsonl"))
    assert Counter(t.tags["bucket"] for t in traces) == {"easy": 2, "medium": 2, "hard": 2}


def test_run_retrieval_on_corpus_directory(tmp_path):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    assert _main(
        "synth-corpus", "--counts", "1", "2", "3",
        "--passages", str(corpus / "passages.jsonl"), "--questions", str(corpus / "questions.jsonl"),
    ) == 0
    assert _main(
        "run", "retrieval", "--corpus", str(corpus), "--method", "dc_llm", "--tau", "0.8", "--runs", "1",
        "--out", str(tmp_path), "--log-file", str(tmp_path / "log.csv"),
    ) == 0
    traces = read_traces(str(tmp_path / "traces" / "retrieval_dc_llm.jsonl"))
    # buckets are reassigned on ingest, so only the total carries over
    assert len(traces) == 6
    assert {t.tags["bucket"] for t in traces} <= {"easy", "medium", "hard"}
    assert all(t.tags["tau"] == 0.8 for t in traces)


def test_missing_corpus_directory(tmp_path):
    assert _main(
        "run", "retrieval", "--corpus", str(tmp_path / "nope"), "--runs", "1",
        "--out", str(tmp_path), "--log-file", str(tmp_path / "log.csv"),
    ) == 1


@pytest.mark.parametrize("argv", [
    ("--synth", "1,2"),
    ("--synth", "a,b,c"),
    ("--synth", "1,-1,1"),
    ("--synth", "1,1,1", "--corpus", "somewhere"),
])
def test_bad_corpus_flags_rejected(tmp_path, argv):
    with pytest.raises(SystemExit):
        _main("run", "retrieval", *argv, "--out", str(tmp_path))
