"""Acceptance suite: one marked group per criterion, summarised at the end of the run.

Run alone with ``pytest tests/test_acceptance.py -v`` (or ``python tests/test_acceptance.py``).
"""
from __future__ import annotations

import random
import time

import pytest

import oracles
import runs
from skillforge.errors import IllegalState, IllegalTransition
from skillforge.graph import GraphNode, GraphParams, OverlapGraph, build_graph, edge_weight, find_candidate_groups
from skillforge.harness import Trainer, export_meta, parse_meta_file
from skillforge.ledger import GateResult
from skillforge.maintenance import filter_gate
from skillforge.model import TRANSITIONS, LifecycleEvent, LifecycleState, Role, Semantics, Skill, TestBundle
from skillforge.oracle import OracleClient
from skillforge.prompts import parse_rules_section
from skillforge.retrieval import RetrievalQuery, SkillRetrievalView, score, select_top_k
from skillforge.scripted import deskworld_backend
from skillforge.store import Repository, RunConfig, checksum, persist, publish, restore, revise

criterion = pytest.mark.criterion

LEGAL = {(s, nxt) for (s, _), nxt in TRANSITIONS.items()}
PASS, FAIL = GateResult(True), GateResult(False, (), "case 0 failed")


def _skill(name: str, **kw) -> Skill:
    base = dict(id="", version=1, semantics=Semantics.WORKFLOW, name=name, description=name,
                body=f"do {name}", source_role=Role.EXTRACTOR)
    base.update(kw)
    return Skill(**base)


# -- 1 ------------------------------------------------------------------------

def _lifecycle_sequence(rng: random.Random, n_ops: int) -> int:
    """Random publish/revise/event operations; returns the illegal transitions seen."""
    repo = Repository()
    illegal = 0
    for op in range(n_ops):
        before = {(sid, r.skill.version): r.state for sid, hist in repo.skills.items() for r in hist}
        kind = rng.random()
        ids = sorted(repo.skills)
        try:
            if kind < 0.3 or not ids:
                state = rng.choice((LifecycleState.TRIAL, LifecycleState.ACTIVE))
                publish(repo, _skill(f"s{op}"), TestBundle("", 1), rng.choice((PASS, PASS, FAIL)), op, state)
            elif kind < 0.5:
                sid = rng.choice(ids)
                body = _skill(f"s{op}", source_role=Role.REFINER, parent_id="x")
                revise(repo, sid, body, TestBundle(sid, 1), rng.choice((PASS, FAIL)), op)
            else:
                repo.apply_event(rng.choice(ids), rng.choice(list(LifecycleEvent)), f"op{op}")
        except (IllegalTransition, IllegalState):
            after = {(sid, r.skill.version): r.state for sid, hist in repo.skills.items() for r in hist}
            assert after == before, "a rejected operation changed state"
        for sid, hist in repo.skills.items():
            assert sum(r.state != LifecycleState.ARCHIVED for r in hist) <= 1, sid
            for r in hist:
                old = before.get((sid, r.skill.version))
                if old is not None and old != r.state and (old, r.state) not in LEGAL:
                    illegal += 1
    return illegal


@criterion(1, "lifecycle soundness over 10,000 random sequences")
def test_lifecycle_soundness():
    rng = random.Random(1)
    t0 = time.perf_counter()
    illegal = sum(_lifecycle_sequence(rng, rng.randint(3, 10)) for _ in range(10_000))
    elapsed = time.perf_counter() - t0
    assert illegal == 0
    assert elapsed < 30.0, f"{elapsed:.1f}s"


# -- 2 ------------------------------------------------------------------------

@criterion(2, "filter gate exact on all 121 (h, p) pairs")
def test_filter_gate_exact():
    tau, tau_p = 2, 1
    mismatches = [(h, p) for h in range(11) for p in range(11)
                  if filter_gate(h, p) != (h >= tau and p < tau_p)]
    assert mismatches == []


# -- 3 ------------------------------------------------------------------------

_TEXTS = (
    "lookup item badge then submit the badge with the account",
    "lookup item crate then submit the crate with the account",
    "unlock the vault before activating the sensor",
    "confirm the order and report the status",
    "escalate the urgent ticket to support",
)
_TOOLS = ("crm_lookup", "crm_submit", "hr_unlock", "hr_activate")
_ERRORS = ("error: crm_submit requires crm_submit.account=ACC-1", "error: hr_activate requires hr_unlock before")


def _random_graph(rng: random.Random) -> tuple[OverlapGraph, dict, set]:
    n = rng.randint(3, 12)
    nodes = {}
    for i in range(n):
        kind = "skill" if rng.random() < 0.1 else "segment"
        nodes[f"n{i:02d}"] = GraphNode(
            f"n{i:02d}", kind, f"task{rng.randint(0, 2)}" if kind == "segment" else f"sk-{i}", i,
            rng.choice(_TEXTS) + (" " + rng.choice(_TEXTS) if rng.random() < 0.3 else ""),
            frozenset(rng.sample(_TOOLS, rng.randint(0, 2))),
            tuple(sorted(rng.sample(("account", "item", "ref", "mode"), rng.randint(0, 2)))),
            tuple(rng.sample(_ERRORS, rng.randint(0, 1))),
        )
    p = rng.uniform(0.35, 0.9)
    edges = {}
    for a in sorted(nodes):
        for b in sorted(nodes):
            if a < b and rng.random() < p:
                edges[(a, b)] = round(rng.uniform(0.18, 1.0), 6)
    g = OverlapGraph(GraphParams(), nodes, edges)
    return g, nodes, {frozenset(e) for e in edges}


@criterion(3, "clique mining equals brute force on 500 random graphs")
def test_clique_oracle_equivalence():
    rng = random.Random(3)
    nonempty = 0
    for _ in range(500):
        g, nodes, edges = _random_graph(rng)
        got = {grp.members: grp.purity_signal for grp in find_candidate_groups(g, 3, 6, top_k=None)}
        want = oracles.brute_force_groups(nodes, edges, 3, 6)
        assert got == want
        nonempty += bool(want)
    assert nonempty > 100  # the draws actually exercise the constraints


# -- 4 ------------------------------------------------------------------------

SUBMIT_ERR = "error: crm_submit requires crm_submit.account=ACC-512"
UNLOCK_ERR = "error: hr_activate requires hr_unlock(item=permit) before hr_activate"
# (text_a, errors_a), (text_b, errors_b), weight computed by tests/oracles.py
EDGE_CASES = [
    (("CALL crm_lookup(item=badge, ref=R1) -> ok: found badge", ()),
     ("CALL crm_lookup(item=badge, ref=R1) -> ok: found badge", ()), 0.7999999999999998),
    ((f"CALL crm_submit(account=?, item=crate, ref=R2) -> {SUBMIT_ERR}", (SUBMIT_ERR,)),
     (f"CALL crm_submit(account=?, item=lens, ref=R9) -> {SUBMIT_ERR}", (SUBMIT_ERR,)), 0.5894607843137256),
    ((f"step 1 turn 1: CALL hr_activate(item=permit, mode=eco) -> {UNLOCK_ERR}", (UNLOCK_ERR,)),
     (f"step 4 turn 2: CALL hr_activate(item=permit, mode=night) -> {UNLOCK_ERR}", (UNLOCK_ERR,)), 0.5729619565217392),
    (("alpha beta gamma delta", ()), ("one two three four five", ()), 0.0),
    (("CALL lab_status(item=sensor) -> ok: status=ready",
      ("error: lab_status requires lab_confirm(item=sensor) before lab_status",)),
     ("CALL lab_status(item=sensor) -> ok: status=ready", ()), 0.7999999999999999),
    (("CALL fleet_submit(account=?, item=ledger) -> error",
      ("error: fleet_submit requires fleet_submit.account=ACC-100", "error: fleet_unlock missing")),
     ("CALL fleet_submit(account=?, item=ledger) -> error",
      ("error: fleet_submit requires fleet_submit.account=ACC-100",)), 1.0),
    (("the quick brown fox jumps", ()), ("the quick brown cat sleeps over", ()), 0.17603629710818453),
    (("crm submit account binding Supply the account binding when calling crm_submit. "
      "crm_submit requires crm_submit.account=ACC-512", ()),
     (f"CALL crm_submit(account=?, item=crate, ref=R2) -> {SUBMIT_ERR}", (SUBMIT_ERR,)), 0.2086981682527051),
    (("unlock the vault then activate the badge", ()), ("activate the badge then unlock the vault", ()), 0.2525),
    (("", ()), ("CALL travel_lookup(item=voucher) -> ok: found voucher", ()), 0.0),
]


@criterion(4, "edge-weight constants and threshold decisions")
def test_edge_weight_constants():
    p = GraphParams()
    assert (p.alpha, p.beta, p.gamma, p.eta, p.error_weight) == (0.45, 0.35, 0.20, 0.18, 1.7)
    for i, ((ta, ea), (tb, eb), frozen) in enumerate(EDGE_CASES):
        assert oracles.edge_weight(ta, tb, ea, eb) == pytest.approx(frozen, abs=1e-12), i
        a = GraphNode(f"a{i}", "segment", "t1", 0, ta, error_texts=ea)
        b = GraphNode(f"b{i}", "segment", "t2", 0, tb, error_texts=eb)
        assert abs(edge_weight(a, b) - frozen) <= 1e-9, i
        g = build_graph([a, b])
        assert (g.weight(a.id, b.id) is not None) == (frozen >= p.eta), i
    kept = sum(c[2] >= p.eta for c in EDGE_CASES)
    assert 0 < kept < len(EDGE_CASES)


# -- 5 ------------------------------------------------------------------------

_WORDS = ("lookup", "submit", "badge", "crate", "account", "unlock", "vault", "status", "urgent", "ticket")


def _random_view(rng: random.Random, i: int) -> SkillRetrievalView:
    text = " ".join(rng.choices(_WORDS, k=rng.randint(2, 6)))
    tools = frozenset(rng.sample(("crm_lookup", "crm_submit", "hr_unlock"), rng.randint(0, 2)))
    skill = _skill(f"skill {text}", id=f"sk-{i:03d}", description=text, body=text,
                   trigger_conditions=(text,), allowed_tools=tools)
    state = rng.choice(list(LifecycleState))
    return SkillRetrievalView.of(skill, state, rng.randint(0, 4), rng.randint(0, 4))


@criterion(5, "top-K equals full-sort truncation; exposure safety")
def test_retrieval_oracle_equivalence():
    rng = random.Random(5)
    for draw in range(1000):
        views = [_random_view(rng, i) for i in range(rng.randint(0, 50))]
        q = RetrievalQuery(" ".join(rng.choices(_WORDS, k=5)) + " crm_submit(account=?)")
        coarse = draw % 3 == 0  # force score ties so the tie-breaks are exercised
        cache = {}
        for v in views:
            s = score(q, v)
            if coarse:
                s = type(s)(round(s.total, 1), s.sparse, s.emb, s.tool, s.trust)
            cache[v.id] = s
        scored = [(v, cache[v.id]) for v in views]
        K = rng.randint(0, 6)
        for mode in ("training", "heldout"):
            got = select_top_k(q, views, K, mode, scorer=lambda _q, v: cache[v.id])
            want = oracles.full_sort_top_k(scored, K, mode)
            assert [v.id for v, _ in got] == [v.id for v, _ in want]
            allowed = {LifecycleState.ACTIVE} if mode == "heldout" else {LifecycleState.ACTIVE, LifecycleState.TRIAL}
            assert all(v.state in allowed for v, _ in got)


# -- 6 ------------------------------------------------------------------------

@criterion(6, "replay determinism of full training runs")
def test_replay_determinism(tmp_path):
    tasks = runs.suite().train
    assert len(tasks) == 50
    digests = []
    for n in range(2):
        t0 = time.perf_counter()
        repo, stats, _ = runs.train(tasks)
        assert time.perf_counter() - t0 < 120.0
        assert stats.tasks == 50
        digests.append(persist(repo, tmp_path / f"run{n}"))
    assert digests[0] == digests[1]
    for f in sorted((tmp_path / "run0").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "run1" / f.relative_to(tmp_path / "run0")).read_bytes()


# -- 7 ------------------------------------------------------------------------

@criterion(7, "parallel and serial macro windows agree")
def test_parallel_serial_equivalence(tmp_path):
    tasks = runs.suite().train
    seed_repo, _, _ = runs.train(tasks[:10], parallel=False)
    persist(seed_repo, tmp_path / "seed")
    results = []
    for parallel in (False, True):
        repo = restore(tmp_path / "seed")
        trainer = Trainer(repo, OracleClient(deskworld_backend()), parallel=parallel)
        outcomes = trainer.run_window(tasks[10:15], repo.tasks_seen + 1)
        cands = sorted((o.task.id, s.signature(), s.body, g.passed) for o in outcomes for s, _, g in o.candidates)
        table = repo.table.to_dict()
        trainer.macro(repo.tasks_seen)
        results.append((table, cands, repo.table.to_dict(), checksum(repo)))
    assert results[0] == results[1]
    assert results[0][1], "the window produced candidates"


# -- 8 ------------------------------------------------------------------------

@criterion(8, "held-out ordering: no-skill < static < full, full - static >= 0.05")
def test_residual_ordering():
    none, static, full = runs.heldout_scores()
    assert none < static < full
    assert full - static >= 0.05


@criterion(8, "held-out ordering: no-skill < static < full, full - static >= 0.05")
def test_residual_ordering_zero_variance():
    tasks = runs.suite().heldout
    again = []
    for _ in range(2):
        full_repo, _, _ = runs.train(runs.suite().train)
        static_repo, _, _ = runs.train(runs.suite().train, static=True)
        again.append((runs.evaluate(tasks, [])[0].mean_utility, runs.evaluate(tasks, static_repo)[0].mean_utility,
                      runs.evaluate(tasks, full_repo)[0].mean_utility))
    assert again[0] == again[1] == runs.heldout_scores()


# -- 9 ------------------------------------------------------------------------

ROLE_TAGS = {"extractor": Role.EXTRACTOR, "refactorer": Role.REFACTORER, "refiner": Role.REFINER}


@criterion(9, "meta-loop contracts")
def test_meta_rules_capped():
    repo, stats, _ = runs.full_run()
    assert stats.meta_attempts > 0
    assert all(len(rules) <= 5 for _, _, rules in stats.meta_history)
    assert all(len(rs.rules) <= 5 for rs in repo.meta.values())


@criterion(9, "meta-loop contracts")
def test_unparseable_meta_leaves_rules_identical():
    initial = export_meta(runs.full_run()[0])
    repo = Repository(config=RunConfig())
    for role, rs in parse_meta_file(initial).items():
        repo.meta[role] = rs
    before = {r: rs.to_text().encode() for r, rs in repo.meta.items()}
    repo, stats, oracle = runs.train(runs.suite().train, repo=repo, fail_meta=True)
    assert len(oracle.log.by_role("meta")) > 0
    assert {r: rs.to_text().encode() for r, rs in repo.meta.items()} == before


@criterion(9, "meta-loop contracts")
def test_role_prompts_carry_current_rules():
    _, stats, oracle = runs.full_run()
    k = RunConfig().k_macro
    history = {r: [((), 0)] for r in Role}
    for index, role, rules in stats.meta_history:
        history[Role(role)].append((tuple(rules), index))
    order = {t.id: i for i, t in enumerate(runs.suite().train)}
    position = {r: 0 for r in Role}
    checked = 0
    for rec in oracle.log.records:
        role = ROLE_TAGS.get(rec.role_tag)
        if role is None:
            continue
        rules = tuple(parse_rules_section(rec.prompt))
        assert all(r in rec.prompt for r in rules)
        seq = history[role]
        if rec.scope.startswith("task:"):
            # tasks see the rules in force when their window started
            start = order[rec.scope[5:]] // k * k
            expected = [rs for rs, idx in seq if idx <= start][-1]
            assert rules == expected
        # rules only ever move forward through the update history
        later = [i for i in range(position[role], len(seq)) if seq[i][0] == rules]
        assert later, (rec.role_tag, rules)
        position[role] = later[0]
        checked += 1
    assert checked > 0
    assert any(r.role_tag == "refiner" for r in oracle.log.records)


# -- 10 -----------------------------------------------------------------------

@criterion(10, "meta-test transfer mechanics")
def test_meta_transfer():
    exported, cold, init, cold_eval, init_eval = runs.transfer_runs()
    frozen = parse_meta_file(exported)
    assert any(rs.rules for rs in frozen.values())
    _, init_stats, init_oracle = init
    assert init_stats.meta_attempts == 0
    assert init_oracle.log.by_role("meta") == []
    prompts = 0
    for rec in init_oracle.log.records:
        role = ROLE_TAGS.get(rec.role_tag)
        if role is None:
            continue
        assert tuple(parse_rules_section(rec.prompt)) == frozen[role].rules
        assert all(r in rec.prompt for r in frozen[role].rules)
        prompts += 1
    assert prompts > 0
    assert init_eval.mean_utility >= cold_eval.mean_utility


# -- 11 -----------------------------------------------------------------------

def _audit(repo: Repository, extra_exposures=()) -> list[str]:
    bad = []
    exposures = [(r.skill_id, r.version) for r in repo.ledger if r.kind == "exposure"] + list(extra_exposures)
    for sid, ver in exposures:
        rec = repo.record(sid, ver)
        released = rec.history and rec.history[0].startswith(("published:", "released:"))
        if not (rec.gate.passed and released):
            bad.append(f"{sid}@v{ver}")
    return bad


@criterion(11, "release gating audit over every run")
def test_release_gating_audit():
    s = runs.suite()
    repos = [runs.full_run()[0], runs.static_run()[0], runs.transfer_runs()[1][0], runs.transfer_runs()[2][0]]
    total = 0
    for repo in repos:
        assert _audit(repo) == []
        total += sum(r.kind == "exposure" for r in repo.ledger)
    for tasks, repo in ((s.heldout, repos[0]), (s.heldout, repos[1]), (s.transfer_heldout, repos[3])):
        report, _ = runs.evaluate(tasks, repo)
        exposed = [(e.split("@v")[0], int(e.split("@v")[1])) for row in report.rows for e in row["exposed"]]
        assert _audit(repo, exposed) == []
        total += len(exposed)
    assert total > 0


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
