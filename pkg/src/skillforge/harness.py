"""Skill-conditioned execution, the online training loop and frozen evaluation."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from . import retrieval
from .deskworld import DeskworldEnv, DeskworldTask, Utility, call_utility, canonical, parse_call
from .errors import MalformedRules, SkillforgeError
from .graph import find_candidate_groups, project, update_graph
from .ledger import GateResult, LedgerRecord
from .maintenance import assign_credit, filter_gate, patch_bundle, refine, run_bundle
from .model import (
    MAX_RULES,
    CreditEvent,
    Judgment,
    LifecycleEvent,
    LifecycleState,
    MetaRuleSet,
    Role,
    Skill,
    TestBundle,
    normalize_rule,
)
from .oracle import OracleClient, user_request
from .prompts import render
from .retrieval import RetrievalQuery, SkillRetrievalView, build_query, render_skills, select_top_k
from .roles import _signature_digest, build_role_feedback, extract, refactor, update_role_rules
from .store import Repository, RunConfig, publish, revise
from .text import digest

log = logging.getLogger(__name__)


# -- traces -----------------------------------------------------------------

@dataclass(frozen=True)
class Step:
    turn: int
    request: str
    action: str
    observation: str
    action_call: str = ""  # canonical call, empty when the action did not parse
    tool: str = ""

    def line(self) -> str:
        return f"turn {self.turn + 1}: {self.action} -> {self.observation}\n"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class RetrievalRecord:
    step: int
    turn: int
    query: RetrievalQuery
    exposed: tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class Trace:
    task_id: str
    task_index: int
    instruction: str
    steps: tuple[Step, ...]
    retrievals: tuple[RetrievalRecord, ...] = ()
    tokens: tuple[tuple[str, int], ...] = (("input", 0), ("output", 0))

    def state(self, i: int) -> str:
        """Serialized state after ``i`` steps: the task plus the first ``i`` pairs."""
        return f"TASK: {self.instruction}\n" + "".join(s.line() for s in self.steps[:i])

    @property
    def final_state(self) -> str:
        return self.state(len(self.steps))

    @property
    def calls(self) -> list[str]:
        return [s.action_call for s in self.steps if s.action_call]

    def exposed(self) -> dict[tuple[str, int], int]:
        """(skill id, version) -> number of steps it was exposed on."""
        out: dict[tuple[str, int], int] = {}
        for r in self.retrievals:
            for key in r.exposed:
                out[key] = out.get(key, 0) + 1
        return out


def _count_tokens(text: str) -> int:
    return len(text.split())


def execute_with_skills(oracle: OracleClient, task: DeskworldTask, store, K: int, mode: str = "training",
                        weights=retrieval.DEFAULT_WEIGHTS, max_rounds: int = 20, task_index: int = 0,
                        attempts_per_turn: int | None = None) -> Trace:
    """Run ``task`` with the executor, retrieving up to ``K`` skills per step.

    ``store`` is a :class:`Repository` or a sequence of retrieval views; it is
    only read."""
    views: Sequence[SkillRetrievalView] = store.views() if hasattr(store, "views") else list(store)
    env = DeskworldEnv(task) if attempts_per_turn is None else DeskworldEnv(task, attempts_per_turn)
    steps: list[Step] = []
    records: list[RetrievalRecord] = []
    tok_in = tok_out = 0
    embed = oracle.embed
    while not env.done and len(steps) < max_rounds:
        turn = env.turn
        q = build_query(task, turn, steps)
        picked = select_top_k(q, views, K, mode, weights, embed)
        exposed = [v for v, _ in picked]
        records.append(RetrievalRecord(len(steps), turn, q, tuple((v.id, v.version) for v in exposed)))
        history = "".join(s.line() for s in steps) or "(none)\n"
        prompt = render("executor", skills=render_skills(exposed), instruction=task.instruction,
                        tools=", ".join(task.tools), history=history.rstrip("\n"), turn=turn + 1,
                        request=task.request_for(turn))
        try:
            raw = oracle.chat(user_request("executor", prompt, temperature=0.0))
        except SkillforgeError as exc:
            raw = f"(executor failure: {exc})"
        tok_in += _count_tokens(prompt)
        tok_out += _count_tokens(raw)
        action = raw.strip().splitlines()[0].strip() if raw.strip() else ""
        parsed = parse_call(action)
        if parsed is None:
            obs = "error: unparseable action"
            # the environment still charges the attempt
            env.step(action or "NOOP")
            steps.append(Step(turn, task.request_for(turn), action or "NOOP", obs))
            continue
        name, args = parsed
        obs = env.step(action)
        steps.append(Step(turn, task.request_for(turn), f"CALL {canonical(name, args)}", obs,
                          canonical(name, args), name))
    return Trace(task.id, task_index, task.instruction, tuple(steps), tuple(records),
                 (("input", tok_in), ("output", tok_out)))


def evaluate_trace(task: DeskworldTask, trace: Trace) -> Utility:
    if trace.task_id != task.id:
        raise ValueError("trace belongs to another task")
    return call_utility(trace.calls, task.expected_calls)


# -- training ---------------------------------------------------------------

@dataclass
class TaskOutcome:
    task: DeskworldTask
    index: int
    trace: Trace
    utility: Utility
    segments: list
    credits: list[CreditEvent]
    candidates: list[tuple[Skill, TestBundle, GateResult]]
    log: object


@dataclass
class TrainingStats:
    tasks: int = 0
    macro_passes: int = 0
    meta_attempts: int = 0
    published: int = 0
    rejected: int = 0
    duplicates: int = 0
    revisions_released: int = 0
    revisions_rejected: int = 0
    disabled: int = 0
    promoted: int = 0
    refactor_candidates: int = 0
    refactor_rejected: int = 0
    utilities: list[float] = field(default_factory=list)
    published_signatures: list[str] = field(default_factory=list)
    meta_history: list[tuple[int, str, tuple[str, ...]]] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["meta_history"] = [[t, r, list(rs)] for t, r, rs in self.meta_history]
        return d


def _run_task(task: DeskworldTask, index: int, views, skills: dict, rules: dict[Role, MetaRuleSet],
              oracle: OracleClient, cfg: RunConfig) -> TaskOutcome:
    o = oracle.fork(f"task:{task.id}")
    trace = execute_with_skills(o, task, views, cfg.K, "training", cfg.weights, cfg.max_rounds, index)
    utility = evaluate_trace(task, trace)
    segments = project(trace, utility)
    exposed = [skills[k] for k in sorted(trace.exposed()) if k in skills]
    credits = assign_credit(trace, utility, exposed, o, cfg.retry_budget, cfg.trace_limit, cfg.body_limit)
    candidates = []
    for skill, bundle in extract(trace, rules[Role.EXTRACTOR], o, cfg.extractor_samples, utility,
                                 cfg.trace_limit, index):
        gate, _ = run_bundle(skill, bundle, o, cfg.body_limit)
        candidates.append((skill, bundle, gate))
    return TaskOutcome(task, index, trace, utility, segments, credits, candidates, o.log)


class Trainer:
    """Owns the repository (the single writer) for one training run."""

    def __init__(self, repo: Repository, oracle: OracleClient, static: bool = False,
                 parallel: bool = True, on_task: Callable[[TaskOutcome], None] | None = None) -> None:
        self.repo = repo
        self.oracle = oracle
        self.static = static
        self.parallel = parallel
        self.on_task = on_task
        self.stats = TrainingStats()
        self.refine_budget: dict[str, int] = {}
        self.dirty: set[str] = set()

    @property
    def cfg(self) -> RunConfig:
        return self.repo.config

    # -- phase 1 ---------------------------------------------------------
    def _snapshot(self):
        repo = self.repo
        views = repo.views()
        skills = {}
        for rec in repo.live():
            skills[(rec.skill.id, rec.skill.version)] = rec.skill
        rules = dict(repo.meta)
        return views, skills, rules

    def run_window(self, tasks: Sequence[DeskworldTask], start_index: int) -> list[TaskOutcome]:
        views, skills, rules = self._snapshot()
        jobs = [(t, start_index + i) for i, t in enumerate(tasks)]
        if self.parallel and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=min(self.cfg.parallel_tasks, len(jobs))) as ex:
                outcomes = list(ex.map(lambda j: _run_task(j[0], j[1], views, skills, rules, self.oracle, self.cfg), jobs))
        else:
            outcomes = [_run_task(t, i, views, skills, rules, self.oracle, self.cfg) for t, i in jobs]
        for out in outcomes:
            self._barrier(out)
        return outcomes

    # -- barrier: serial merge in task order ----------------------------
    def _live_signatures(self) -> set[str]:
        return {_signature_digest(r.skill) for r in self.repo.live()
                if r.state in (LifecycleState.TRIAL, LifecycleState.ACTIVE)}

    def _publish(self, skill: Skill, bundle: TestBundle, gate: GateResult, index: int) -> str | None:
        if gate.passed and _signature_digest(skill) in self._live_signatures():
            self.stats.duplicates += 1
            return None
        sid, _ = publish(self.repo, skill, bundle, gate, index)
        if gate.passed:
            self.stats.published += 1
            self.stats.published_signatures.append(f"{skill.source_role.value}:{skill.name}")
        else:
            self.stats.rejected += 1
        return sid

    def _barrier(self, out: TaskOutcome) -> None:
        repo = self.repo
        self.oracle.log.extend(out.log)
        update_graph(repo.graph, out.segments, [r.skill for r in repo.live()
                                                if r.state in (LifecycleState.TRIAL, LifecycleState.ACTIVE)])
        for (sid, ver), n in sorted(out.trace.exposed().items()):
            repo.append_ledger(LedgerRecord(0, "exposure", out.task.id, sid, ver, retrieved=n))
            cur = repo.current(sid)
            if cur is not None and cur.skill.version == ver and sid in repo.evidence:
                ev = repo.evidence[sid]
                repo.evidence[sid] = _with(ev, usage=ev.usage.bump(retrieved=n, exposed=1))
        for e in out.credits:
            repo.append_ledger(LedgerRecord(0, "credit", e.task_id, e.skill_id, e.version, e.judgment.value,
                                            digest(e.attribution_scope)))
            cur = repo.current(e.skill_id)
            if cur is None or cur.skill.version != e.version or e.skill_id not in repo.evidence:
                continue
            ev = repo.evidence[e.skill_id]
            used = 1 if e.judgment in (Judgment.HELPFUL, Judgment.HARMFUL) else 0
            repo.evidence[e.skill_id] = _with(ev, credits=ev.credits + (e,), usage=ev.usage.bump(executed=used))
        for skill, bundle, gate in out.candidates:
            self._publish(skill, bundle, gate, out.index)
        self._micro(out)
        repo.tasks_seen += 1
        self.stats.tasks += 1
        self.stats.utilities.append(out.utility.score)
        if self.on_task:
            self.on_task(out)

    def _micro(self, out: TaskOutcome) -> None:
        """Patch bundles from this task's credit and repair harmful skills."""
        repo = self.repo
        harmful: list[str] = []
        for e in out.credits:
            cur = repo.current(e.skill_id)
            if cur is None or cur.skill.version != e.version or cur.state not in (
                    LifecycleState.TRIAL, LifecycleState.ACTIVE):
                continue
            new_bundle = patch_bundle(cur.bundle, e, self.cfg.bundle_cap)
            if new_bundle != cur.bundle:
                repo.set_bundle(e.skill_id, new_bundle)
                self.dirty.add(e.skill_id)
            if e.judgment == Judgment.HARMFUL and e.skill_id not in harmful:
                harmful.append(e.skill_id)
        for sid in harmful:
            self._try_refine(sid, out.index)

    def _try_refine(self, sid: str, index: int) -> bool:
        repo = self.repo
        used = self.refine_budget.get(sid, 0)
        if used >= self.cfg.refine_attempts_per_window:
            return False
        cur = repo.current(sid)
        if cur is None or cur.state not in (LifecycleState.TRIAL, LifecycleState.ACTIVE):
            return False
        self.refine_budget[sid] = used + 1
        cand = refine(cur, repo.evidence[sid], repo.meta[Role.REFINER], self.oracle, self.cfg.retry_budget,
                      self.cfg.body_limit, self.cfg.evidence_limit, index)
        if cand is None:
            return False
        skill, bundle = cand
        gate, _ = run_bundle(skill, bundle, self.oracle, self.cfg.body_limit)
        revise(repo, sid, skill, bundle, gate, index)
        if gate.passed:
            self.stats.revisions_released += 1
            self.dirty.discard(sid)
        else:
            self.stats.revisions_rejected += 1
        return gate.passed

    # -- macro maintenance ----------------------------------------------
    def macro(self, index: int) -> None:
        repo, cfg = self.repo, self.cfg
        self.stats.macro_passes += 1
        # refactor the strongest unprocessed groups
        groups = [g for g in find_candidate_groups(repo.graph, cfg.clique_min, cfg.clique_max, None)
                  if digest("|".join(g.members)) not in repo.refactored][: cfg.top_k_groups]
        for g in groups:
            repo.refactored.add(digest("|".join(g.members)))
            cands, rejected = refactor(g, repo.graph, repo.meta[Role.REFACTORER], self.oracle, index)
            self.stats.refactor_rejected += rejected
            for skill, bundle in cands:
                self.stats.refactor_candidates += 1
                gate, _ = run_bundle(skill, bundle, self.oracle, cfg.body_limit)
                self._publish(skill, bundle, gate, index)
        # refiner pass over skills whose bundles changed
        for sid in sorted(self.dirty):
            cur = repo.current(sid)
            if cur is None or cur.state not in (LifecycleState.TRIAL, LifecycleState.ACTIVE):
                continue
            gate, _ = run_bundle(cur.skill, cur.bundle, self.oracle, cfg.body_limit)
            if not gate.passed:
                self._try_refine(sid, index)
        self.dirty.clear()
        # filter gate
        for rec in list(repo.live()):
            c = repo.table.get(rec.skill.id, rec.skill.version)
            if not filter_gate(c.harmful, c.helpful, cfg.tau_filter, cfg.tau_protect):
                continue
            if rec.state == LifecycleState.ACTIVE:
                repo.apply_event(rec.skill.id, LifecycleEvent.FILTER_DISABLE, f"filtered@t{index}")
                self.stats.disabled += 1
            elif rec.state == LifecycleState.TRIAL:
                repo.apply_event(rec.skill.id, LifecycleEvent.GATE_FAIL, f"filtered@t{index}")
        # promote trials that spent at least one full window on trial
        for rec in list(repo.live()):
            if rec.state != LifecycleState.TRIAL or rec.skill.created_at_task > index - cfg.k_macro:
                continue
            gate, _ = run_bundle(rec.skill, rec.bundle, self.oracle, cfg.body_limit)
            event = LifecycleEvent.GATE_PASS if gate.passed else LifecycleEvent.GATE_FAIL
            repo.apply_event(rec.skill.id, event, f"promotion-{'pass' if gate.passed else 'fail'}@t{index}")
            self.stats.promoted += int(gate.passed)
        repo.buffers = build_role_feedback(repo)
        if not (self.static or repo.freeze_meta):
            for role in Role:
                new, called = update_role_rules(role, repo.meta[role], repo.buffers[role], cfg.buffer_sample_n,
                                                self.oracle, cfg.seed, index, cfg.evidence_limit)
                self.stats.meta_attempts += 1
                repo.meta[role] = new
                self.stats.meta_history.append((index, role.value, new.rules))
        self.refine_budget.clear()

    def train(self, tasks: Sequence[DeskworldTask]) -> TrainingStats:
        k = self.cfg.k_macro
        i = 0
        while i < len(tasks):
            # windows align to the repository's task counter so resumed runs keep the cadence
            room = k - (self.repo.tasks_seen % k)
            chunk = list(tasks[i:i + room])
            start = self.repo.tasks_seen + 1
            self.run_window(chunk, start)
            i += len(chunk)
            if self.repo.tasks_seen % k == 0:
                self.macro(self.repo.tasks_seen)
        return self.stats


def _with(obj, **kw):
    from dataclasses import replace

    return replace(obj, **kw)


def run_training(tasks: Sequence[DeskworldTask], config: RunConfig | None, oracle: OracleClient,
                 repo: Repository | None = None, static: bool = False, parallel: bool = True):
    """Train over ``tasks``; returns ``(repository, meta rule sets, stats)``."""
    if repo is None:
        repo = Repository(config=config or RunConfig())
    trainer = Trainer(repo, oracle, static=static, parallel=parallel)
    stats = trainer.train(tasks)
    return repo, dict(repo.meta), stats


# -- frozen evaluation ------------------------------------------------------

@dataclass
class EvalReport:
    mean_utility: float
    rows: list[dict]
    tokens: dict[str, int]
    baseline_mean: float | None = None
    delta: float | None = None

    def to_dict(self) -> dict:
        return {"baseline_mean": self.baseline_mean, "delta": self.delta, "mean_utility": self.mean_utility,
                "rows": self.rows, "tokens": self.tokens}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["mean_utility"], d["rows"], d["tokens"], d.get("baseline_mean"), d.get("delta"))


def evaluate_frozen(tasks: Sequence[DeskworldTask], store, oracle: OracleClient, K: int = 3,
                    weights=retrieval.DEFAULT_WEIGHTS, max_rounds: int = 20,
                    baseline: EvalReport | None = None, workers: int = 5) -> EvalReport:
    """Held-out evaluation over an immutable snapshot (only active skills exposed)."""
    views = tuple(store.views()) if hasattr(store, "views") else tuple(store)

    def one(item):
        i, task = item
        o = oracle.fork(f"eval:{task.id}")
        trace = execute_with_skills(o, task, views, K, "heldout", weights, max_rounds, i)
        u = evaluate_trace(task, trace)
        return task, trace, u, o.log

    items = list(enumerate(tasks, 1))
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one, items))
    else:
        results = [one(it) for it in items]
    rows = []
    tin = tout = 0
    for task, trace, u, lg in results:
        oracle.log.extend(lg)
        tok = dict(trace.tokens)
        tin += tok["input"]
        tout += tok["output"]
        exposed = sorted({f"{s}@v{v}" for s, v in trace.exposed()})
        rows.append({"task_id": task.id, "utility": u.score, "matched": u.matched, "emitted": u.emitted,
                     "expected": u.expected, "exposed": exposed})
    mean = sum(r["utility"] for r in rows) / len(rows) if rows else 0.0
    report = EvalReport(mean, rows, {"input": tin, "output": tout})
    if baseline is not None:
        report.baseline_mean = baseline.mean_utility
        report.delta = mean - baseline.mean_utility
    return report


# -- meta-skill export / transfer ------------------------------------------

ROLE_HEADER = "[{}]"


def export_meta(repo: Repository) -> str:
    out = []
    for role in Role:
        out.append(ROLE_HEADER.format(role.value))
        out.extend(f"{i}. {r}" for i, r in enumerate(repo.meta[role].rules, 1))
    return "\n".join(out) + "\n"


def parse_meta_file(text: str) -> dict[Role, MetaRuleSet]:
    """Rule sets from an exported file; an empty file is a cold start."""
    sets: dict[Role, list[str]] = {r: [] for r in Role}
    role: Role | None = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if s.startswith("[") and s.endswith("]"):
            try:
                role = Role(s[1:-1].strip())
            except ValueError:
                raise MalformedRules(f"line {n}: unknown role {s}") from None
            continue
        if role is None:
            raise MalformedRules(f"line {n}: rule outside a role section")
        rule = normalize_rule(s)
        if rule:
            sets[role].append(rule)
    for role, rules in sets.items():
        if len(rules) > MAX_RULES:
            raise MalformedRules(f"{role.value}: {len(rules)} rules exceed the limit of {MAX_RULES}")
    return {r: MetaRuleSet(r, tuple(rs), 0) for r, rs in sets.items()}


def meta_test_init(repo: Repository, frozen_rules_path: str | Path) -> Repository:
    """Seed ``repo`` with frozen meta rules and disable online meta updates."""
    try:
        text = Path(frozen_rules_path).read_text("utf-8")
    except OSError as exc:
        raise MalformedRules(f"cannot read {frozen_rules_path}: {exc}") from None
    sets = parse_meta_file(text)
    for role, rs in sets.items():
        repo.meta[role] = MetaRuleSet(role, rs.rules, repo.tasks_seen)
    repo.freeze_meta = True
    return repo
