"""Small worked examples for individual operations."""
from __future__ import annotations

import json
from array import array

import pytest

import runs
from skillforge import kernels
from skillforge.errors import CorruptRepository
from skillforge.graph import GraphNode, build_graph, find_candidate_groups, project
from skillforge.harness import Step, Trace, execute_with_skills
from skillforge.ledger import CreditCounts, CreditTable, GateResult
from skillforge.model import CreditEvent, Judgment, LifecycleState, MetaRuleSet, Role, Semantics, Skill, TestBundle
from skillforge.oracle import HashingEmbedder, OracleClient, ScriptedBackend
from skillforge.retrieval import RetrievalQuery, SkillRetrievalView, build_query, combine, select_top_k
from skillforge.roles import extract, record_outcome
from skillforge.scripted import deskworld_backend
from skillforge.store import Repository, SkillRecord, checksum, persist, restore

W = (0.30, 0.40, 0.20, 0.10)


def test_combine_examples():
    assert combine((1, 1, 1, 1), W) == pytest.approx(1.0)
    assert combine((0, 0, 0, 0), W) == 0.0
    assert combine((1, 0, 0, 0), W) == pytest.approx(0.3)


def test_edge_weight_hand_arithmetic():
    # sparse 2/5 = 0.4, emb = 0.2, no errors -> 0.45*0.4 + 0.35*0.2 = 0.25 (kept: >= 0.18)
    fa, fb = array("Q", [1, 2, 3, 4]), array("Q", [3, 4, 5])
    ea, eb = array("d", [1.0, 0.0]), array("d", [0.2, 0.9797958971132712])
    w = kernels.pair_weight(fa, fb, ea, eb, array("Q"), array("Q"), 0.45, 0.35, 0.20, 1.7)
    assert w == pytest.approx(0.25, abs=1e-12) and w >= 0.18


def steps_for(tools):
    return tuple(Step(i, "r", f"CALL {t}(x=1)", "ok: done", f"{t}(x=1)", t) for i, t in enumerate(tools))


def test_projection_examples():
    assert len(project(Trace("t", 0, "i", steps_for(["a_lookup"] * 5)))) == 1
    segs = project(Trace("t", 0, "i", steps_for(["a_lookup", "b_submit", "a_confirm"])))
    assert [s.span for s in segs] == [(0, 0), (1, 1), (2, 2)]
    assert project(Trace("t", 0, "i", ())) == []


def test_graph_examples():
    text = "lookup the crate then submit it"
    g = build_graph([GraphNode("x", "segment", "t0", 0, "completely unrelated words")])
    assert g.insert(GraphNode("y", "segment", "t1", 1, text)) and g.degree("y") == 0
    assert not g.insert(GraphNode("y", "segment", "t1", 1, text))  # same id: no-op
    tri = build_graph([GraphNode(f"s{i}", "segment", f"t{i % 2}", i, text, frozenset({"a_lookup"}))
                       for i in range(3)])
    assert all(tri.weight(a, b) is not None for a, b in [("s0", "s1"), ("s0", "s2"), ("s1", "s2")])
    assert find_candidate_groups(build_graph([])) == []


def test_credit_counting():
    evs = [CreditEvent("s", 1, "t", Judgment.HELPFUL), CreditEvent("s", 1, "t", Judgment.HELPFUL),
           CreditEvent("s", 1, "t", Judgment.HARMFUL)]
    c = CreditTable().apply_events(evs).get("s", 1)
    assert (c.harmful, c.helpful) == (1, 2)
    assert CreditTable().apply_events([]) == CreditTable()


def test_replay_buffer_examples():
    s = Skill("sk-1", 1, Semantics.WORKFLOW, "n", "d", "b", Role.EXTRACTOR)
    rec = SkillRecord(s, LifecycleState.ACTIVE, TestBundle("sk-1", 1), GateResult(True))
    buf = record_outcome({}, rec, CreditCounts(exposed=0))
    assert not buf["sk-1@v1"].mature
    buf = record_outcome(buf, rec, CreditCounts(exposed=3, helpful=1))
    assert len(buf) == 1 and buf["sk-1@v1"].mature and buf["sk-1@v1"].get("helpful") == 1


def test_extract_examples():
    trace = Trace("t", 0, "i", steps_for(["a_lookup"]))
    tape = [json.dumps({"skill": {"name": f"n{i}", "semantics": "workflow", "body": "b"}}) for i in range(3)]
    assert len(extract(trace, MetaRuleSet(Role.EXTRACTOR), OracleClient(ScriptedBackend({"extractor": tape})))) == 3
    assert extract(trace, MetaRuleSet(Role.EXTRACTOR), OracleClient(ScriptedBackend({"extractor": ["x"] * 3}))) == []


def test_query_examples():
    task = runs.suite().train[0]
    q = build_query(task, 0, [])
    assert q.recent_tool_errors == () and q == build_query(task, 0, [])


def test_retrieval_examples():
    s = Skill("sk-1", 1, Semantics.WORKFLOW, "n", "d", "b", Role.EXTRACTOR)
    disabled = [SkillRetrievalView.of(s, LifecycleState.DISABLED)]
    assert select_top_k(RetrievalQuery("b"), disabled, 3) == []


def test_embedding_examples():
    e = HashingEmbedder()
    v = e.embed("submit the crate now")
    assert list(v) == list(HashingEmbedder().embed("submit the crate now"))
    assert kernels.dot(v, v) == pytest.approx(1.0)
    assert kernels.dot(e.embed(""), v) == 0.0


def test_empty_store_equals_no_skill_run():
    task = runs.suite().train[0]
    a = execute_with_skills(OracleClient(deskworld_backend()), task, Repository(), 3)
    o = OracleClient(deskworld_backend())
    b = execute_with_skills(o, task, [], 3)
    assert a.steps == b.steps
    assert all("RELEVANT SKILLS" not in r.prompt for r in o.log.by_role("executor"))


def test_one_window_runs_one_macro_pass():
    _, stats, _ = runs.train(runs.suite().train[:5])
    assert (stats.macro_passes, stats.meta_attempts) == (1, 3)


def test_store_round_trip_examples(tmp_path):
    empty = Repository()
    assert persist(empty, tmp_path / "e") == checksum(restore(tmp_path / "e"))
    persist(runs.full_run()[0], tmp_path / "f")
    f = tmp_path / "f" / "graph.snapshot"
    f.write_bytes(f.read_bytes()[:-10])
    with pytest.raises(CorruptRepository):
        restore(tmp_path / "f")
