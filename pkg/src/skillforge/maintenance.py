"""Credit assignment, bundle gating and patching, refinement and the filter gate."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .errors import PreconditionError, SkillforgeError
from .ledger import CreditTable, GateResult
from .model import (
    BundleCase,
    CaseKind,
    CreditEvent,
    EvidenceState,
    Judgment,
    LifecycleState,
    MetaRuleSet,
    Role,
    Semantics,
    Skill,
    TestBundle,
)
from .oracle import OracleClient, user_request
from .prompts import first_json_object, render, render_rules
from .text import digest, truncate

log = logging.getLogger(__name__)

__all__ = [
    "CreditTable",
    "GateResult",
    "GateFailure",
    "assign_credit",
    "update_credit_table",
    "filter_gate",
    "run_bundle",
    "patch_bundle",
    "refine",
    "parse_candidate",
]

DEFAULT_BUNDLE_CAP = 12


def _attempts(retry_budget: int) -> int:
    return max(1, retry_budget)


def render_trace(trace, limit: int) -> str:
    lines = [f"INSTRUCTION: {trace.instruction}"]
    for i, st in enumerate(trace.steps):
        lines.append(f"step {i} turn {st.turn}: {st.action} -> {st.observation}")
    return truncate("\n".join(lines), limit)


def assign_credit(trace, utility, exposed_skills: Sequence[Skill], oracle: OracleClient,
                  retry_budget: int = 2, trace_limit: int = 8000, body_limit: int = 2000) -> list[CreditEvent]:
    """One credit event per exposed skill, judged by the credit oracle.

    Judgments that cannot be parsed become ``uncertain``; if no response
    parses within the retry budget every event is ``uncertain``."""
    if not exposed_skills:
        return []
    trace_text = render_trace(trace, trace_limit)
    skills_text = "\n".join(
        f'<<skill id="{s.id}" v={s.version} name="{s.name}">>\n{truncate(s.body, body_limit)}\n<</skill>>'
        for s in exposed_skills
    )
    score = getattr(utility, "score", utility)
    prompt = render("credit", utility=f"{score:.4f}", trace=trace_text, skills=skills_text)
    parsed = None
    for _ in range(_attempts(retry_budget)):
        try:
            raw = oracle.chat(user_request("credit", prompt, temperature=0.0))
        except SkillforgeError as exc:
            log.warning("credit oracle failed: %s", exc)
            continue
        obj = first_json_object(raw)
        if obj is not None and isinstance(obj.get("judgments"), list):
            parsed = obj["judgments"]
            break
    fallback_scope = trace_text.splitlines()[0] if trace_text else ""
    by_key = {}
    for j in parsed or ():
        if isinstance(j, dict) and "skill_id" in j:
            by_key.setdefault(str(j["skill_id"]), j)
    events = []
    for s in exposed_skills:
        j = by_key.get(s.id)
        judgment = Judgment.UNCERTAIN
        rationale = "no parseable judgment"
        scope = fallback_scope
        if j is not None:
            try:
                judgment = Judgment(str(j.get("judgment", "")).strip().lower())
            except ValueError:
                judgment = Judgment.UNCERTAIN
            rationale = str(j.get("rationale", ""))
            cand = str(j.get("scope", "")).strip()
            if cand and cand in trace_text:
                scope = cand
        events.append(CreditEvent(s.id, s.version, trace.task_id, judgment, rationale, scope))
    return events


def update_credit_table(table: CreditTable, events: Iterable[CreditEvent]) -> CreditTable:
    """Accumulate counts; commutative over event multisets."""
    return table.apply_events(events)


def filter_gate(h_s: int, p_s: int, tau: int = 2, tau_p: int = 1) -> bool:
    """True when a skill should be disabled: harmful count reached ``tau`` and
    helpful count is still below ``tau_p``."""
    if min(h_s, p_s, tau, tau_p) < 0:
        raise ValueError("counts and thresholds are non-negative")
    return h_s >= tau and p_s < tau_p


@dataclass(frozen=True)
class GateFailure:
    case: BundleCase
    reason: str


def _case_label(i: int, c: BundleCase) -> str:
    return f"{i}:{c.kind.value}:{digest(c.input_fragment, 8)}"


def run_bundle(skill: Skill, bundle: TestBundle, oracle: OracleClient,
               body_limit: int = 2000) -> tuple[GateResult, list[GateFailure]]:
    """Evaluate every bundle case with the verdict oracle; pass iff all pass.

    An empty bundle passes vacuously for knowledge skills and fails
    otherwise. Oracle failures fail the gate."""
    if (bundle.skill_id, bundle.version) != (skill.id, skill.version):
        raise PreconditionError(f"bundle targets {bundle.skill_id}@v{bundle.version}, not {skill.id}@v{skill.version}")
    if not bundle.cases:
        if skill.semantics == Semantics.KNOWLEDGE:
            return GateResult(True, (), ""), []
        return GateResult(False, (), "bundle missing"), []
    results, failures = [], []
    for i, case in enumerate(bundle.cases):
        prompt = render("bundle_verdict", body=truncate(skill.body, body_limit), kind=case.kind.value,
                        input=case.input_fragment, expected=case.expected_behavior, rule=case.verdict_rule)
        try:
            raw = oracle.chat(user_request("bundle_verdict", prompt, temperature=0.0)).strip()
        except SkillforgeError as exc:
            raw = f"FAIL: oracle failure ({exc})"
        ok = raw.upper().startswith("PASS")
        label = _case_label(i, case)
        results.append((label, ok))
        if not ok:
            reason = raw if raw.upper().startswith("FAIL") else f"FAIL: unparseable verdict {raw[:80]!r}"
            failures.append(GateFailure(case, reason))
    passed = not failures
    digest_text = "; ".join(f"{_case_label(bundle.cases.index(f.case), f.case)} {f.reason}" for f in failures)
    return GateResult(passed, tuple(results), digest_text), failures


CASE_RULES = {
    CaseKind.NEGATIVE: "The skill must not induce the calls in this fragment.",
    CaseKind.UNIT: "The skill must still lead to the calls in this fragment.",
}


def patch_bundle(bundle: TestBundle, event: CreditEvent | GateFailure, cap: int = DEFAULT_BUNDLE_CAP) -> TestBundle:
    """Append at most one minimal case derived from ``event``.

    Harmful credit yields a negative case, helpful credit a unit case and a
    gate failure an integration copy of the failed case. Cases are
    de-duplicated by (kind, input digest); past ``cap`` the oldest unit
    case (else the oldest case) is evicted."""
    if isinstance(event, CreditEvent):
        if event.skill_id != bundle.skill_id:
            raise PreconditionError("event references a different skill")
        if event.judgment == Judgment.HARMFUL:
            kind = CaseKind.NEGATIVE
            expected = "no harmful call is induced"
        elif event.judgment == Judgment.HELPFUL:
            kind = CaseKind.UNIT
            expected = "the helpful call is still produced"
        else:
            return bundle
        if not event.attribution_scope:
            return bundle
        case = BundleCase(kind, event.attribution_scope, expected, CASE_RULES[kind])
    else:
        src = event.case
        case = BundleCase(CaseKind.INTEGRATION, src.input_fragment, src.expected_behavior, src.verdict_rule)
    if any(c.key() == case.key() for c in bundle.cases):
        return bundle
    cases = list(bundle.cases) + [case]
    while len(cases) > cap:
        idx = next((i for i, c in enumerate(cases) if c.kind == CaseKind.UNIT), 0)
        del cases[idx]
    return replace(bundle, cases=tuple(cases))


def parse_bundle_cases(items) -> tuple[BundleCase, ...]:
    out = []
    for it in items or ():
        if not isinstance(it, dict):
            continue
        try:
            kind = CaseKind(str(it.get("kind", "unit")))
        except ValueError:
            continue
        inp = str(it.get("input", "")).strip()
        if not inp:
            continue
        rule = str(it.get("rule", "")).strip() or CASE_RULES.get(kind, CASE_RULES[CaseKind.UNIT])
        out.append(BundleCase(kind, inp, str(it.get("expected", "")), rule))
    return tuple(out)


def parse_candidate(obj, role: Role, skill_id: str = "pending", version: int = 1,
                    parent_id: str | None = None, task_index: int = 0):
    """``(Skill, cases)`` from a role's JSON skill object, or ``None``."""
    if not isinstance(obj, dict):
        return None
    try:
        semantics = Semantics(str(obj.get("semantics", "")))
    except ValueError:
        return None
    name = str(obj.get("name", "")).strip()
    body = str(obj.get("body", "")).strip()
    if not name or not body:
        return None

    def strs(key):
        v = obj.get(key) or []
        if isinstance(v, str):
            v = [v]
        return [str(x).strip() for x in v if str(x).strip()]

    skill = Skill(
        id=skill_id,
        version=version,
        semantics=semantics,
        name=name,
        description=str(obj.get("description", "")).strip(),
        body=body,
        source_role=role,
        trigger_conditions=tuple(strs("trigger_conditions")),
        allowed_tools=frozenset(strs("allowed_tools")),
        domains=frozenset(strs("domains")),
        parent_id=parent_id,
        created_at_task=task_index,
    )
    return skill, parse_bundle_cases(obj.get("bundle"))


def refine(record, evidence: EvidenceState, rules: MetaRuleSet, oracle: OracleClient,
           retry_budget: int = 2, body_limit: int = 2000, evidence_limit: int = 4000,
           task_index: int = 0) -> tuple[Skill, TestBundle] | None:
    """One candidate revision from the refiner oracle, or ``None``.

    The candidate keeps the skill id, bumps the version and links its parent;
    it carries the revised bundle when one is returned, else the inherited one."""
    if record.state not in (LifecycleState.TRIAL, LifecycleState.ACTIVE):
        raise PreconditionError(f"cannot refine a {record.state.value} skill")
    skill = record.skill
    ev_lines = [f"{c.judgment.value}: {c.attribution_scope} ({c.rationale})" for c in evidence.credits]
    prompt = render(
        "refiner",
        rules=render_rules(rules.rules),
        skill=truncate(json.dumps(skill.to_dict(), sort_keys=True, indent=1), body_limit + 1000),
        bundle="\n".join(f"- {c.kind.value}: {c.input_fragment} | {c.verdict_rule}" for c in evidence.bundle.cases) or "(empty)",
        evidence=truncate("\n".join(ev_lines) or "(none)", evidence_limit),
    )
    for _ in range(_attempts(retry_budget)):
        try:
            raw = oracle.chat(user_request("refiner", prompt, temperature=0.7))
        except SkillforgeError as exc:
            log.warning("refiner oracle failed: %s", exc)
            continue
        obj = first_json_object(raw)
        if obj is None:
            continue
        parsed = parse_candidate(obj.get("skill"), Role.REFINER, skill.id, skill.version + 1,
                                 f"{skill.id}@v{skill.version}", task_index)
        if parsed is None:
            continue
        cand, _ = parsed
        if "bundle" in obj:
            cases = parse_bundle_cases(obj.get("bundle"))
        else:
            cases = evidence.bundle.cases
        return cand, TestBundle(skill.id, skill.version + 1, cases)
    return None
