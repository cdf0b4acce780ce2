from __future__ import annotations

import json

from skillforge.cli import main, read_calls


def test_cli_end_to_end(tmp_path, capsys):
    suite, full, static = tmp_path / "suite", tmp_path / "full", tmp_path / "static"
    assert main(["deskworld", "generate", "--families", "10", "--seed", "1", "-o", str(suite),
                 "--train-tasks", "15", "--heldout-tasks", "5"]) == 0
    assert (suite / "train.json").exists()
    capsys.readouterr()

    assert main(["train", str(suite), "--repo", str(full), "--seed", "1"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["tasks"] == 15 and summary["macro_passes"] == 3
    assert len(read_calls(full)) == summary["oracle_calls"]

    assert main(["train", str(suite), "--repo", str(static), "--static"]) == 0
    assert json.loads(capsys.readouterr().out)["meta_attempts"] == 0

    base, report = tmp_path / "base.json", tmp_path / "report.json"
    assert main(["eval", str(suite), "--repo", str(full), "--baseline", str(base), "-o", str(report)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert base.exists() and out["tasks"] == 5
    assert out["delta"] == out["mean_utility"] - out["baseline_mean"]

    meta = tmp_path / "meta.txt"
    assert main(["meta-export", "--repo", str(full), "-o", str(meta)]) == 0
    assert main(["train", str(suite / "transfer_train.json"), "--repo", str(tmp_path / "x"), "--static",
                 "--init-meta", str(meta), "--freeze-meta"]) == 0
    assert json.loads(capsys.readouterr().out)["meta_attempts"] == 0

    assert main(["inspect", "--repo", str(full)]) == 0
    listing = capsys.readouterr().out
    assert listing.startswith("tasks_seen=15")
    sid = listing.splitlines()[1].split()[0]
    assert main(["inspect", "--repo", str(full), "--skill", sid]) == 0
    assert f'"id": "{sid}"' in capsys.readouterr().out


def test_cli_resumes_existing_repository(tmp_path, capsys):
    suite, repo = tmp_path / "suite", tmp_path / "repo"
    main(["deskworld", "generate", "--families", "5", "-o", str(suite), "--train-tasks", "5"])
    main(["train", str(suite), "--repo", str(repo)])
    main(["train", str(suite), "--repo", str(repo)])
    capsys.readouterr()
    main(["inspect", "--repo", str(repo)])
    assert capsys.readouterr().out.startswith("tasks_seen=10")


def test_cli_reports_errors(tmp_path, capsys):
    assert main(["inspect", "--repo", str(tmp_path / "missing")]) == 2
    assert "error" in capsys.readouterr().err
