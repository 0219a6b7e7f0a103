from __future__ import annotations

import json
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from idleak.cli import build_parser, main
from idleak.service import app_from_dirs

from .test_harness import MINI

SMALL = {"steps": 150, "batch_size": 32, "widths": [8, 16, 32, 32]}


def _ok(*argv):
    assert main([str(a) for a in argv]) == 0


@pytest.fixture(scope="module")
def ws(tmp_path_factory) -> Path:
    """A workspace built entirely through the CLI."""
    w = tmp_path_factory.mktemp("cli")
    _ok("corpus", "--seed", 3, "--ids", 16, "--per-id", 6, "--out", w / "corpus")
    _ok("corpus", "--seed", 3, "--ids", 40, "--per-id", 6, "--id-offset", 1000, "--out", w / "cal")
    _ok("corpus", "--seed", 3, "--ids", 10, "--per-id", 3, "--id-offset", 2000, "--out", w / "paircorpus")
    (w / "teacher.json").write_text(json.dumps(SMALL))
    _ok("train-teacher", "--corpus", w / "corpus", "--config", w / "teacher.json", "--out", w / "teacher")
    (w / "short.json").write_text(json.dumps({"steps": 30, "batch_size": 16}))
    for m in ("MINUS", "HIGHPASS", "PARTIAL"):
        _ok("protect", "--method", m.lower(), "--in", w / "corpus", "--out", w / "tpl" / m)
        _ok("protect", "--method", m, "--in", w / "paircorpus", "--out", w / "pairs" / m)
    _ok("distill", "--teacher", w / "teacher", "--method", "MINUS", "--config", w / "short.json",
        "--corpus", w / "corpus", "--out", w / "student")
    _ok("train-decoder", "--teacher", w / "teacher", "--corpus", w / "corpus", "--config", w / "short.json",
        "--out", w / "decoder")
    _ok("calibrate", "--teacher", w / "teacher", "--corpus", w / "cal", "--levels", "1e-3", "--out", w / "th.json")
    return w


def test_corpus_refuses_overwrite(ws, capsys):
    assert main(["corpus", "--seed", "3", "--ids", "4", "--per-id", "2", "--out", str(ws / "corpus")]) == 1
    assert "exists" in capsys.readouterr().err


def test_embed_link_probe(ws):
    _ok("embed", "--model", ws / "student", "--templates", ws / "tpl" / "MINUS", "--out", ws / "emb" / "MINUS")
    _ok("embed", "--model", ws / "teacher", "--corpus", ws / "corpus", "--out", ws / "emb" / "ORIGINAL")
    _ok("link", "--embeddings", ws / "emb" / "MINUS", ws / "emb" / "ORIGINAL", "--out", ws / "link.json")
    link = json.loads((ws / "link.json").read_text())
    assert link["linkage"]["query_domains"] == ["MINUS", "ORIGINAL"]
    assert "MINUS->ORIGINAL" in link["verification"]
    _ok("probe", "--embeddings", ws / "emb" / "ORIGINAL", "--attributes", ws / "corpus" / "attributes.json",
        "--out", ws / "probe.json")
    assert "group_accuracy" in json.loads((ws / "probe.json").read_text())


def test_regen_local_and_mock_agree(ws):
    common = ["--decoder", ws / "decoder", "--student", ws / "student", "--templates", ws / "tpl" / "MINUS",
              "--teacher", ws / "teacher", "--thresholds", ws / "th.json", "--k", 3]
    _ok("regen", *common, "--out", ws / "regen_local.json")
    _ok("regen", *common, "--verifier", "mock", "--out", ws / "regen_mock.json")
    local = json.loads((ws / "regen_local.json").read_text())
    mock = json.loads((ws / "regen_mock.json").read_text())
    assert local["attempts"] == mock["attempts"] and mock["errors"] == {}


def test_regen_mock_with_faults_records_errors(ws):
    _ok("regen", "--decoder", ws / "decoder", "--student", ws / "student", "--templates", ws / "tpl" / "MINUS",
        "--teacher", ws / "teacher", "--thresholds", ws / "th.json", "--k", 2, "--verifier", "mock",
        "--inject-timeouts", 0.6, "--retries", 0, "--out", ws / "regen_faulty.json")
    rep = json.loads((ws / "regen_faulty.json").read_text())
    assert rep["errors"] and all("Timeout" in e for e in rep["errors"].values())


def test_http_verifier_requires_endpoint(ws):
    with pytest.raises(SystemExit):
        main(["regen", "--decoder", str(ws / "decoder"), "--student", str(ws / "student"), "--templates",
              str(ws / "tpl" / "MINUS"), "--teacher", str(ws / "teacher"), "--thresholds", str(ws / "th.json"),
              "--verifier", "http", "--out", str(ws / "x.json")])


def test_disconnect(ws):
    _ok("disconnect", "--corpus", ws / "corpus", "--teacher", ws / "teacher", "--pairs", 20, "--out", ws / "d.json")
    assert "spearman_psnr_identity" in json.loads((ws / "d.json").read_text())


def test_zk_train_and_eval(ws):
    (ws / "zk.json").write_text(json.dumps({"steps": 20, "batch_size": 16, "augmentation": {"sigma_range": [1, 2]}}))
    _ok("zk", "train", "--teacher", ws / "teacher", "--corpus", ws / "corpus", "--config", ws / "zk.json",
        "--out", ws / "proxy")
    _ok("embed", "--model", ws / "proxy", "--templates", ws / "tpl" / "PARTIAL", "--out", ws / "emb" / "ZK_PARTIAL")
    _ok("zk", "eval", "--proxy", ws / "proxy", "--teacher", ws / "teacher", "--templates",
        *[ws / "tpl" / m for m in ("MINUS", "HIGHPASS", "PARTIAL")], "--pairs", ws / "pairs",
        "--decoder", ws / "decoder", "--thresholds", ws / "th.json", "--out", ws / "zk_eval.json")
    rep = json.loads((ws / "zk_eval.json").read_text())
    assert set(rep["methods"]) == {"MINUS", "HIGHPASS", "PARTIAL"}
    for r in rep["methods"].values():
        assert len(r["validation"]["per_pair"]) == 30
        assert "success_at_5" in r


def test_zk_eval_rejects_wrong_pair_budget(ws, tmp_path):
    _ok("corpus", "--seed", 3, "--ids", 10, "--per-id", 2, "--id-offset", 3000, "--out", tmp_path / "c20")
    _ok("protect", "--method", "MINUS", "--in", tmp_path / "c20", "--out", tmp_path / "p" / "MINUS")
    (ws / "zk0.json").write_text(json.dumps({"steps": 2, "batch_size": 8}))
    _ok("zk", "train", "--teacher", ws / "teacher", "--corpus", ws / "corpus", "--config", ws / "zk0.json",
        "--out", tmp_path / "proxy")
    code = main(["zk", "eval", "--proxy", str(tmp_path / "proxy"), "--teacher", str(ws / "teacher"),
                 "--templates", str(ws / "tpl" / "MINUS"), "--pairs", str(tmp_path / "p"), "--out",
                 str(tmp_path / "z.json")])
    assert code == 1


def test_run_and_report(tmp_path, monkeypatch):
    monkeypatch.setenv("IDLEAK_CACHE_DIR", str(tmp_path / "cache"))
    (tmp_path / "cfg.json").write_text(json.dumps(MINI))
    _ok("run", "--config", tmp_path / "cfg.json", "--stages", "calibrate", "disconnect", "--out", tmp_path / "run")
    assert sorted(p.name for p in (tmp_path / "cache").iterdir()) == ["calibrate", "corpus", "disconnect", "teacher"]
    _ok("report", "--run", tmp_path / "run", "--format", "markdown", "--out", tmp_path / "r.md")
    text = (tmp_path / "r.md").read_text()
    assert "FAR calibration" in text and "Pixel metrics" in text
    _ok("report", "--run", tmp_path / "run", "--format", "csv", "--out", tmp_path / "r.csv")


def test_run_rejects_credential_in_config(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"linkage": {"seed": 0, "token": "x"}}))
    assert main(["run", "--config", str(tmp_path / "cfg.json")]) == 1
    assert "environment variable" in capsys.readouterr().err


def test_serve_builds_app_from_artifacts(ws, monkeypatch):
    args = build_parser().parse_args(["serve", "--teacher", str(ws / "teacher"), "--thresholds", str(ws / "th.json"),
                                      "--token-env", "IDLEAK_CLI_TOKEN"])
    assert args.port == 8000 and args.token_env == "IDLEAK_CLI_TOKEN"
    monkeypatch.setenv("IDLEAK_CLI_TOKEN", "t")
    client = TestClient(app_from_dirs(args.teacher, args.thresholds, args.token_env))
    assert client.get("/health").json()["status"] == "ok"
