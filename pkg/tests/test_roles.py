from __future__ import annotations

import json

import pytest

from skillforge.errors import PreconditionError
from skillforge.graph import CandidateGroup, GraphNode, build_graph
from skillforge.harness import Step, Trace
from skillforge.model import MetaRuleSet, ReplayRow, Role
from skillforge.oracle import OracleClient, ScriptedBackend
from skillforge.roles import extract, parse_meta_response, refactor, sample_rows, update_role_rules

TRACE = Trace("t1", 1, "do it", (Step(0, "r", "CALL crm_submit(item=x)", "error: crm_submit requires crm_submit.account=A"),))


def skill_json(name="crm_submit_binding", tools=("crm_submit",)):
    return {"skill": {"name": name, "semantics": "callable_function", "body": "pass account=A",
                      "trigger_conditions": ["submit"], "allowed_tools": list(tools),
                      "bundle": [{"kind": "unit", "input": f"frag for {name}", "expected": "ok"}]}}


def test_extract_merges_duplicate_samples():
    tape = [json.dumps(skill_json()), json.dumps(skill_json()), "no json here"]
    o = OracleClient(ScriptedBackend({"extractor": tape}))
    rules = MetaRuleSet(Role.EXTRACTOR, ("Prefer bindings.",))
    (cand,) = extract(TRACE, rules, o, n_samples=3)
    skill, bundle = cand
    assert skill.name == "crm_submit_binding" and skill.source_role == Role.EXTRACTOR
    assert len(bundle.cases) == 1
    assert all("- Prefer bindings." in r.prompt for r in o.log.records)
    with pytest.raises(PreconditionError):
        extract(TRACE, rules, o, n_samples=0)


def test_refactor_checks_member_support():
    nodes = [GraphNode(f"s{i}", "segment", f"t{i}", i, "CALL crm_submit(item=x)", frozenset({"crm_submit"}))
             for i in range(3)]
    g = build_graph(nodes)
    grp = CandidateGroup(("s0", "s1", "s2"), "shared_tools", 3, False, 0.9, ("crm_submit",))
    resp = json.dumps({"skills": [skill_json()["skill"], skill_json("other", ("hr_unlock",))["skill"]]})
    cands, rejected = refactor(grp, g, MetaRuleSet(Role.REFACTORER), OracleClient(ScriptedBackend({"refactorer": [resp]})))
    assert [c[0].name for c in cands] == ["crm_submit_binding"] and rejected == 1
    with pytest.raises(PreconditionError):
        refactor(CandidateGroup((), "", 0, False, 0.0), g, MetaRuleSet(Role.REFACTORER), OracleClient(ScriptedBackend()))


def test_parse_meta_response():
    assert parse_meta_response("ANALYSIS: a\nSUMMARY: b\nRULES:\n1. x\n2. y\n") == ["1. x", "2. y"]
    assert parse_meta_response("RULES:\n1. x") is None
    assert parse_meta_response("SUMMARY: b\nANALYSIS: a\nRULES:\n1. x") is None
    assert parse_meta_response("ANALYSIS: a\nSUMMARY: b\nRULES:\n") is None


def rows(n):
    return {f"sk-{i}@v1": ReplayRow(Role.REFINER, f"sk-{i}", 1, (("name", f"n{i}"), ("state", "active")), i % 2 == 0)
            for i in range(n)}


def test_sample_rows_is_seeded_and_mature_only():
    buf = rows(10)
    a = sample_rows(buf, 3, seed=1, task_index=5, role=Role.REFINER)
    assert a == sample_rows(buf, 3, seed=1, task_index=5, role=Role.REFINER)
    assert all(r.mature for r in a) and len(a) == 3


@pytest.mark.parametrize("response", ["garbage", "ANALYSIS: x\nSUMMARY: y\nRULES:\n   \n"])
def test_meta_update_fallback_keeps_rules(response):
    rules = MetaRuleSet(Role.REFINER, ("Keep me.",), 3)
    o = OracleClient(ScriptedBackend({"meta": [response]}))
    new, called = update_role_rules(Role.REFINER, rules, rows(4), 20, o)
    assert called and new is rules


def test_meta_update_caps_rules_and_skips_empty_buffers():
    body = "\n".join(f"{i}. Rule number {i}." for i in range(1, 9))
    o = OracleClient(ScriptedBackend({"meta": [f"ANALYSIS: a\nSUMMARY: b\nRULES:\n{body}\n"]}))
    new, called = update_role_rules(Role.REFINER, MetaRuleSet(Role.REFINER), rows(4), 20, o, task_index=10)
    assert called and len(new.rules) == 5 and new.updated_at_task == 10
    same, called = update_role_rules(Role.REFINER, new, {}, 20, o)
    assert not called and same is new
