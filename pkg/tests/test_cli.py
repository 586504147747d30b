import json

import pytest

from lloco.cli import build_parser, main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, out


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_pipeline_end_to_end(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("LLOCO_ARTIFACTS", raising=False)
    base, data, art = tmp_path / "base", tmp_path / "data", tmp_path / "art"
    assert run(capsys, "pretrain", "--out", str(base), "--steps", "0", "--d-model", "32")[0] == 0
    assert run(capsys, "synth", "--task", "kv", "--group", "kv", "--docs", "4", "--out", str(data))[0] == 0
    code, out = run(capsys, "preprocess", "--corpus", str(data / "corpus"), "--groups", str(data / "groups.json"),
                    "--base", str(base), "--out", str(art))
    assert code == 0 and json.loads(out)["indexed"] == 4
    code, out = run(capsys, "finetune", "--group", "kv", "--train", str(data / "kv.jsonl"), "--out", str(art),
                    "--max-steps", "2", "--lr", "1e-3")
    assert code == 0 and "registered" in out
    code, out = run(capsys, "query", "--artifacts", str(art), "What does ana have?", "--mode", "lloco",
                    "--doc", "kv-0000")
    assert code == 0 and json.loads(out)["summary_rows"] == 4
    code, out = run(capsys, "eval", "--artifacts", str(art), "--dataset", str(data / "kv.jsonl"), "--mode",
                    "no_context", "--out", str(tmp_path / "ev"))
    assert code == 0 and json.loads(out)["n"] == 16
    assert (tmp_path / "ev" / "results.json").exists()
    monkeypatch.setenv("LLOCO_ARTIFACTS", str(art))
    code, out = run(capsys, "query", "--artifacts", "/does/not/exist", "q?", "--mode", "no_context")
    assert code == 0


def test_bench_latency_cli(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("LLOCO_ARTIFACTS", raising=False)
    code, _ = run(capsys, "bench", "latency", "--sizes", "120,240", "--window", "512", "--runs", "1",
                  "--out", str(tmp_path / "lat"))
    assert code == 0
    body = json.loads((tmp_path / "lat" / "results.json").read_text())
    assert len(body["rows"]) == 4


def test_missing_artifacts_is_an_error(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("LLOCO_ARTIFACTS", raising=False)
    assert main(["query", "q?"]) == 2
