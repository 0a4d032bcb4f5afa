import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from detrust_fl.cli import main
from detrust_fl.config import DatasetSpec, RunConfig
from detrust_fl.engine import plaintext_reference

SMALL = ["--lambda", "64", "-n", "3", "--t-g", "2"]


@pytest.fixture(autouse=True)
def insecure_groups(monkeypatch):
    monkeypatch.setenv("DETRUST_INSECURE_SMALL_GROUP", "1")


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def small_config_file(tmp_path, **kw):
    cfg = RunConfig(lambda_bits=64, n=3, t_local=2, local_epochs=1,
                    dataset=DatasetSpec(n_samples=300, n_features=4), **kw)
    path = tmp_path / "cfg.json"
    cfg.save(path)
    return path


def test_run_writes_all_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", *SMALL, "-m", "3", "--out", str(out), "--trace"]) == 0
    rows = read_csv(out / "metrics.csv")
    assert [r["round"] for r in rows] == ["1", "2", "3"]
    assert list(rows[0]) == ["round", "accuracy", "loss", "bytes_tx", "interactions"]
    assert len(read_csv(out / "timings.csv")) == 3
    report = json.loads((out / "interactions.json").read_text())
    assert report["metered"] == 3 * 3 + 2 * 3 + 1 and report["matches_formula"]
    assert len(json.loads((out / "final_model.json").read_text())["values"]) > 0
    assert len((out / "rounds.jsonl").read_text().splitlines()) == 3
    assert RunConfig.load(out / "config.json").m == 3
    assert (out / "trace.jsonl").stat().st_size > 0
    assert json.loads(capsys.readouterr().out)["rounds"] == 3


def test_default_round_count_gives_twenty_rows(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--lambda", "256", "--out", str(out)]) == 0
    assert len(read_csv(out / "metrics.csv")) == 20
    assert json.loads((out / "interactions.json").read_text())["metered"] == 111


def test_config_file_and_determinism(tmp_path):
    path = small_config_file(tmp_path, m=4)
    for name in ("a", "b"):
        assert main(["run", "--config", str(path), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_weighted_run_tracks_plaintext_fedavg(tmp_path):
    path = small_config_file(tmp_path, m=3)
    out = tmp_path / "w"
    assert main(["run", "--config", str(path), "--weights-from-samples", "--out", str(out)]) == 0
    cfg = RunConfig.load(out / "config.json")
    assert cfg.fusion == "weighted"
    secure = np.array(json.loads((out / "final_model.json").read_text())["values"])
    ref = plaintext_reference(cfg).final_model
    # p = 4 encoding plus p_w = 2 weight rounding, compounded over three rounds
    assert np.max(np.abs(secure - ref)) < 1e-2


def test_infeasible_threshold_exits_nonzero(tmp_path, capsys):
    assert main(["run", *SMALL[:4], "--t-g", "4", "--out", str(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "InfeasibleConstraints"


def test_precision_sweep(tmp_path):
    path = small_config_file(tmp_path, m=2)
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(path), "--axis", "precision", "--values", "2", "4", "--out", str(out)]) == 0
    rows = read_csv(out / "summary.csv")
    assert [r["value"] for r in rows] == ["2", "4"]
    assert all(r["status"] == "ok" for r in rows)


def test_sweep_records_failures_and_continues(tmp_path):
    path = small_config_file(tmp_path, m=1, t_bp=3)
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(path), "--axis", "parties", "--values", "2", "3", "--out", str(out)]) == 0
    rows = read_csv(out / "summary.csv")
    assert rows[0]["status"] == "failed" and "InfeasibleConstraints" in rows[0]["error"]
    assert rows[1]["status"] == "ok"


def test_sweep_needs_values():
    with pytest.raises(SystemExit):
        main(["sweep", "--axis", "precision", "--values"])


def test_attack_subcommand(tmp_path, capsys):
    out = tmp_path / "rep.json"
    assert main(["attack", "--kind", "replay", "-n", "6", "--colluders", "2,3,4", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["attack"] == "Replay" and rep["outcome"] == "BlockedByLabel"
    assert main(["attack", "--kind", "isolation", "--target", "2", "--support", "2"]) == 0
    assert "BlockedByInspection" in capsys.readouterr().out


def test_keygen_ceremony(tmp_path, capsys):
    out = tmp_path / "keys"
    assert main(["keygen-ceremony", "-n", "3", "--lambda", "64", "--seed", "1", "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["seeds_symmetric"] and summary["lambda"] == 64
    assert sorted(p.name for p in out.iterdir()) == ["party-1.json", "party-2.json", "party-3.json", "pp.json"]


def test_validate_matrix(capsys):
    assert main(["validate-matrix", "--matrix", "[[1,2],[1,2],[3,4]]", "--t-g", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["valid"]
    assert main(["validate-matrix", "--matrix", "[[1,1,0],[1,0,0]]", "--weights", "--t-g", "1"]) == 1
    report = json.loads(capsys.readouterr().out)
    assert not report["batch_partitioning"] and report["exposed_by_rank_test"] == [1, 2]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "detrust_fl", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("run", "sweep", "attack", "keygen-ceremony", "validate-matrix"):
        assert sub in proc.stdout
