from __future__ import annotations

import pytest

import runs
from skillforge.errors import MalformedRules
from skillforge.harness import (
    evaluate_trace,
    execute_with_skills,
    export_meta,
    meta_test_init,
    parse_meta_file,
)
from skillforge.model import Role
from skillforge.oracle import OracleClient
from skillforge.scripted import deskworld_backend
from skillforge.store import Repository, checksum


def test_no_skill_execution_misses_hidden_binding():
    task = runs.suite().heldout[0]
    o = OracleClient(deskworld_backend())
    trace = execute_with_skills(o, task, [], K=3, mode="heldout")
    assert all(r.exposed == () for r in trace.retrievals)
    u = evaluate_trace(task, trace)
    assert 0.0 < u.score < 1.0  # the error costs an extra call
    assert trace.final_state.startswith("TASK: ") and trace.state(0) == f"TASK: {task.instruction}\n"
    with pytest.raises(ValueError):
        evaluate_trace(runs.suite().heldout[1], trace)


def test_trained_store_exposes_only_active_skills_held_out():
    repo = runs.full_run()[0]
    active = {(r.skill.id, r.skill.version) for r in repo.live() if r.state.value == "active"}
    before = checksum(repo)
    report, _ = runs.evaluate(runs.suite().heldout[:5], repo)
    exposed = {(e.split("@v")[0], int(e.split("@v")[1])) for row in report.rows for e in row["exposed"]}
    assert exposed and exposed <= active
    assert checksum(repo) == before


def test_training_stats_and_lifecycle_activity():
    repo, stats, _ = runs.full_run()
    assert stats.tasks == 50 and stats.macro_passes == 10
    assert stats.published > 0 and stats.promoted > 0 and stats.revisions_released > 0
    assert repo.tasks_seen == 50


def test_meta_export_round_trip(tmp_path):
    repo = runs.full_run()[0]
    text = export_meta(repo)
    assert text.splitlines()[0] == "[extractor]"
    sets = parse_meta_file(text)
    assert {r: s.rules for r, s in sets.items()} == {r: s.rules for r, s in repo.meta.items()}
    p = tmp_path / "meta.txt"
    p.write_text(text)
    fresh = meta_test_init(Repository(), p)
    assert fresh.freeze_meta and fresh.meta[Role.EXTRACTOR].rules == repo.meta[Role.EXTRACTOR].rules


def test_meta_file_errors():
    assert all(not s.rules for s in parse_meta_file("").values())
    with pytest.raises(MalformedRules):
        parse_meta_file("1. orphan rule")
    with pytest.raises(MalformedRules):
        parse_meta_file("[planner]\n1. x")
    with pytest.raises(MalformedRules):
        parse_meta_file("[refiner]\n" + "\n".join(f"{i}. Rule {i}." for i in range(1, 7)))
    with pytest.raises(MalformedRules):
        meta_test_init(Repository(), "/nonexistent/meta.txt")
