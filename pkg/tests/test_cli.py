import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from graphvqa.cli import EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, RunConfig, file_digest, main
from graphvqa.explain import GraphExport, node_degrees
from graphvqa.trainer import Checkpoint

SMALL = {
    "data": {"n_scenes": 10, "questions_per_scene": 4, "seed": 1},
    "model": {"d_w": 8, "d_q": 8, "d_g": 8, "K": 2, "m": 3, "d_h": [8, 8]},
    "train": {"epochs": 2, "lr_halve_epoch": 1, "batch_size": 8},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(SMALL))
    return p


@pytest.fixture
def trained(tmp_path, cfg_path):
    data = tmp_path / "data"
    assert main(["gen", "--config", str(cfg_path), "--out", str(data)]) == EXIT_OK
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(out)]) == EXIT_OK
    return data, out


def test_gen_writes_declared_counts_and_is_reproducible(tmp_path, cfg_path):
    for d in ("a", "b"):
        assert main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / d)]) == EXIT_OK
    for f in ("scenes.bin", "questions.txt", "vocab.txt"):
        assert file_digest(tmp_path / "a" / f) == file_digest(tmp_path / "b" / f)
    head = json.loads((tmp_path / "a" / "scenes.bin").read_bytes().split(b"\n", 1)[0])
    assert head["n_scenes"] == 10
    q = (tmp_path / "a" / "questions.txt").read_text().splitlines()
    assert json.loads(q[0])["count"] == len(q) - 1 == 40


def test_unknown_key_is_config_error_naming_key(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump({"train": {"learning_rate": 0.1}}))
    assert main(["gen", "--config", str(p), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "learning_rate" in capsys.readouterr().err
    p.write_text(yaml.safe_dump({"extra": 1}))
    assert main(["gen", "--config", str(p), "--out", str(tmp_path / "x")]) == EXIT_CONFIG


def test_usage_errors_exit_one(tmp_path):
    assert main([]) == EXIT_CONFIG
    assert main(["train"]) == EXIT_CONFIG
    assert main(["gen", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_runtime_error_exits_two(tmp_path, trained):
    data, out = trained
    (out / "checkpoint" / "arrays.bin").write_bytes(b"")
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--data", str(data)]) == EXIT_RUNTIME


def test_config_from_environment(tmp_path, cfg_path, monkeypatch):
    monkeypatch.setenv("GRAPHVQA_CONFIG", str(cfg_path))
    assert main(["gen", "--out", str(tmp_path / "env")]) == EXIT_OK
    assert json.loads((tmp_path / "env" / "scenes.bin").read_bytes().split(b"\n", 1)[0])["n_scenes"] == 10


def test_run_config_round_trip_and_derived_mismatch():
    rc = RunConfig.from_dict(SMALL)
    assert RunConfig.from_dict(rc.to_dict()).to_dict() == rc.to_dict()
    rc.model["C"] = 999
    with pytest.raises(Exception, match="does not match"):
        rc.model_config(vocab_size=10, C=5, d_v_raw=32)


def test_train_outputs_and_eval(trained, capsys):
    data, out = trained
    assert {p.name for p in out.iterdir()} >= {"run.json", "train.jsonl", "checkpoint"}
    recs = [json.loads(x) for x in (out / "train.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in recs] == [1, 2]
    assert recs[1]["lr"] == recs[0]["lr"] / 2
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--data", str(data), "--json",
                 str(out / "ev.json")]) == EXIT_OK
    assert "overall" in capsys.readouterr().out
    assert json.loads((out / "ev.json").read_text())["n"] == 8


@pytest.mark.parametrize("pathway", ["graph", "knn", "attention"])
def test_model_flag_selects_pathway(tmp_path, cfg_path, pathway):
    out = tmp_path / pathway
    assert main(["train", "--config", str(cfg_path), "--model", pathway, "--epochs", "1", "--out", str(out)]) == 0
    assert Checkpoint.load(out / "checkpoint").model_cfg.pathway == pathway


def test_resume_matches_uninterrupted(tmp_path, cfg_path):
    d = dict(SMALL, train={"epochs": 4, "lr_halve_epoch": 3, "batch_size": 8})
    d["model"] = dict(SMALL["model"], dropout_p=0.2)
    p = tmp_path / "r.yaml"
    p.write_text(yaml.safe_dump(d))
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "full")]) == 0
    assert main(["train", "--config", str(p), "--epochs", "2", "--out", str(tmp_path / "part")]) == 0
    # the second half needs the original schedule, so resume with the full config
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "part"),
                 "--resume", str(tmp_path / "part" / "checkpoint")]) == 0
    full = (tmp_path / "full" / "train.jsonl").read_text().splitlines()
    part = (tmp_path / "part" / "train.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in part] == [1, 2, 3, 4]
    assert part[2:] == full[2:]
    for f in ("arrays.bin", "manifest.json"):
        assert file_digest(tmp_path / "full" / "checkpoint" / f) == file_digest(tmp_path / "part" / "checkpoint" / f)


def test_sweep_grid_and_restart(tmp_path, cfg_path, capsys):
    out = tmp_path / "sweep"
    argv = ["sweep", "--config", str(cfg_path), "--epochs", "1", "--K", "2,4", "--m", "2,4", "--out", str(out)]
    assert main(argv) == EXIT_OK
    rows = (out / "sweep.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["K", "m", "overall", "yes/no", "number", "other", "relation"]
    assert [r.split("\t")[:2] for r in rows[1:]] == [["2", "2"], ["2", "4"], ["4", "2"], ["4", "4"]]
    cell = out / "cell_K4_m2.json"
    marker = json.loads(cell.read_text())
    marker["overall"] = 0.123456
    cell.write_text(json.dumps(marker))
    (out / "cell_K4_m4.json").unlink()
    assert main(argv) == EXIT_OK
    rows2 = (out / "sweep.tsv").read_text().splitlines()
    assert rows2[3].split("\t")[2] == "0.1235"  # reused, not retrained
    assert rows2[4] == rows[4]


def test_explain_export(trained, tmp_path):
    data, out = trained
    ex_path, dot_path = tmp_path / "ex.json", tmp_path / "ex.dot"
    assert main(["explain", "--checkpoint", str(out / "checkpoint"), "--data", str(data), "--qid", "3",
                 "--out", str(ex_path), "--dot", str(dot_path)]) == EXIT_OK
    ex = GraphExport.from_json(ex_path.read_text())
    N, m = 8, 3
    assert ex.qid == 3 and len(ex.nodes) == N and len(ex.edges) == N * m
    assert all(0 < e["weight"] < 1 for e in ex.edges)
    nbr = np.array([[e["j"] for e in ex.edges if e["i"] == i] for i in range(N)])
    alpha = np.array([[e["weight"] for e in ex.edges if e["i"] == i] for i in range(N)])
    np.testing.assert_allclose([n["degree"] for n in ex.nodes], node_degrees(nbr, alpha), atol=1e-12)
    dot = dot_path.read_text()
    assert dot.startswith("digraph") and "penwidth" in dot
    assert main(["explain", "--checkpoint", str(out / "checkpoint"), "--data", str(data), "--qid", "999",
                 "--out", str(ex_path)]) == EXIT_CONFIG


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--json", str(tmp_path / "g.json")]) == EXIT_OK
    assert json.loads((tmp_path / "g.json").read_text())["passed"] is True
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--mutate", "sign-flip"]) == EXIT_CHECK_FAILED
    assert "FAIL" in capsys.readouterr().out


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "graphvqa", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "graphvqa" in r.stdout
