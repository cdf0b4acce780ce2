"""Extractor and refactorer role calls, role replay buffers and meta-rule updates."""
from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass, replace
from typing import Mapping

from .errors import PreconditionError, SkillforgeError
from .graph import CandidateGroup, GraphNode, OverlapGraph
from .maintenance import parse_candidate, render_trace
from .model import MAX_RULES, LifecycleState, MetaRuleSet, ReplayRow, Role, Skill, TestBundle
from .oracle import OracleClient, user_request
from .prompts import first_json_object, render, render_rules
from .text import digest, truncate, words

log = logging.getLogger(__name__)

TEMPLATE_IDS = {Role.EXTRACTOR: "extractor", Role.REFACTORER: "refactorer", Role.REFINER: "refiner"}


@dataclass(frozen=True)
class RoleContext:
    role: Role
    rules: MetaRuleSet
    template_id: str

    @classmethod
    def of(cls, rules: MetaRuleSet) -> "RoleContext":
        return cls(rules.role, rules, TEMPLATE_IDS[rules.role])


Candidate = tuple[Skill, TestBundle]


def _signature_digest(skill: Skill) -> str:
    return digest(skill.name.strip().lower() + "|" + "|".join(t.strip().lower() for t in skill.trigger_conditions))


def _merge(cands: list[Candidate]) -> list[Candidate]:
    out: dict[str, Candidate] = {}
    for skill, bundle in cands:
        key = _signature_digest(skill)
        if key not in out:
            out[key] = (skill, bundle)
            continue
        first, fb = out[key]
        seen = {c.key() for c in fb.cases}
        extra = tuple(c for c in bundle.cases if c.key() not in seen)
        out[key] = (first, replace(fb, cases=fb.cases + extra))
    return list(out.values())


def extract(trace, rules: MetaRuleSet, oracle: OracleClient, n_samples: int = 3, utility=None,
            trace_limit: int = 8000, task_index: int = 0) -> list[Candidate]:
    """Up to ``n_samples`` candidate skills from one trace, duplicates merged."""
    if n_samples < 1:
        raise PreconditionError("n_samples must be >= 1")
    score = getattr(utility, "score", utility)
    trace_text = render_trace(trace, trace_limit)
    cands: list[Candidate] = []
    for k in range(1, n_samples + 1):
        prompt = render("extractor", rules=render_rules(rules.rules), sample=k, n_samples=n_samples,
                        utility="n/a" if score is None else f"{score:.4f}", trace=trace_text)
        try:
            raw = oracle.chat(user_request("extractor", prompt, temperature=0.7))
        except SkillforgeError as exc:
            log.warning("extractor sample %d failed: %s", k, exc)
            continue
        obj = first_json_object(raw)
        if obj is None:
            continue
        parsed = parse_candidate(obj.get("skill"), Role.EXTRACTOR, task_index=task_index)
        if parsed is None:
            continue
        skill, cases = parsed
        cands.append((skill, TestBundle(skill.id, 1, cases)))
    return _merge(cands)


def _member_line(node: GraphNode) -> str:
    errs = " | ".join(node.error_texts) or "none"
    tools = ", ".join(sorted(node.tools)) or "none"
    return f"- [{node.id}] source={node.source} tools: {tools}; errors: {errs}\n  {truncate(node.text, 600)}"


def supported(candidate: Skill, node: GraphNode) -> bool:
    """Does ``node`` support ``candidate``? Declared tools must all occur in the
    member; a tool-agnostic candidate needs a trigger whose words all occur."""
    if candidate.allowed_tools:
        have = set(node.tools)
        if node.kind == "skill":
            have |= {t for t in candidate.allowed_tools if t + "(" in node.text or t in words(node.text)}
        return candidate.allowed_tools <= have
    text_words = set(words(node.text))
    return any(set(words(t)) and set(words(t)) <= text_words for t in candidate.trigger_conditions)


def refactor(group: CandidateGroup, graph: OverlapGraph, rules: MetaRuleSet, oracle: OracleClient,
             task_index: int = 0) -> tuple[list[Candidate], int]:
    """Candidates abstracted from ``group`` that every member supports, plus the
    number rejected by the support check. One oracle call."""
    if not group.members:
        raise PreconditionError("empty candidate group")
    nodes = [graph.nodes[m] for m in group.members]
    prompt = render("refactorer", purity=group.purity_signal, shared=", ".join(group.shared) or "none",
                    rules=render_rules(rules.rules), members="\n".join(_member_line(n) for n in nodes))
    try:
        raw = oracle.chat(user_request("refactorer", prompt, temperature=0.7))
    except SkillforgeError as exc:
        log.warning("refactorer failed: %s", exc)
        return [], 0
    obj = first_json_object(raw)
    items = obj.get("skills") if isinstance(obj, dict) else None
    out: list[Candidate] = []
    rejected = 0
    for item in items if isinstance(items, list) else ():
        parsed = parse_candidate(item, Role.REFACTORER, task_index=task_index)
        if parsed is None:
            rejected += 1
            continue
        skill, cases = parsed
        if all(supported(skill, n) for n in nodes):
            out.append((skill, TestBundle(skill.id, 1, cases)))
        else:
            rejected += 1
    return _merge(out), rejected


# -- role feedback ----------------------------------------------------------

def evidence_snapshot(record, counts, failure: str = "") -> tuple[tuple[str, object], ...]:
    s = record.skill
    ev = {
        "body": " | ".join(ln.strip() for ln in s.body.splitlines() if ln.strip()),
        "exposed": counts.exposed,
        "failure": failure or record.gate.failure_digest,
        "gate": "pass" if record.gate.passed else "fail",
        "harmful": counts.harmful,
        "helpful": counts.helpful,
        "history": list(record.history),
        "name": s.name,
        "neutral": counts.neutral,
        "parent": s.parent_id or "",
        "state": record.state.value,
        "trigger": "; ".join(s.trigger_conditions),
        "uncertain": counts.uncertain,
    }
    return tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in ev.items()))


def record_outcome(buffer: Mapping[str, ReplayRow], record, counts, maturity_min_exposures: int = 3) -> dict[str, ReplayRow]:
    """Upsert the row for ``record``'s skill version with its latest evidence.

    A row is mature once the version saw enough exposures or reached a
    terminal decision (disabled / archived)."""
    s = record.skill
    role = Role(s.source_role)
    mature = counts.exposed >= maturity_min_exposures or record.state in (
        LifecycleState.ARCHIVED, LifecycleState.DISABLED)
    row = ReplayRow(role, s.id, s.version, evidence_snapshot(record, counts), mature)
    out = dict(buffer)
    out[row.key] = row
    return out


def build_role_feedback(repo) -> dict[Role, dict[str, ReplayRow]]:
    """Rebuild every role buffer from the repository's version histories."""
    buffers: dict[Role, dict[str, ReplayRow]] = {r: {} for r in Role}
    m = repo.config.maturity_min_exposures
    for sid in sorted(repo.skills):
        for rec in repo.skills[sid]:
            role = Role(rec.skill.source_role)
            counts = repo.table.get(sid, rec.skill.version)
            buffers[role] = record_outcome(buffers[role], rec, counts, m)
    return buffers


def evidence_digest(rows) -> str:
    lines = []
    for r in rows:
        ev = dict(r.evidence)
        parts = [f"{k}={ev.get(k, '')}" for k in ("name", "trigger", "state", "gate", "helpful", "harmful",
                                             "neutral", "uncertain", "exposed", "parent")]
        line = f"[{r.key}] " + " ".join(parts)
        line += f"\n  body: {ev.get('body', '')}"
        if ev.get("failure"):
            line += f"\n  bundle failure: {ev['failure']}"
        hist = ev.get("history") or ()
        if hist:
            line += f"\n  lifecycle: {', '.join(hist)}"
        lines.append(line)
    return "\n".join(lines)


_SECTION_RE = re.compile(r"^\s*(ANALYSIS|SUMMARY|RULES)\s*:", re.M)


def parse_meta_response(text: str) -> list[str] | None:
    """Rules from an ANALYSIS / SUMMARY / RULES response, or ``None``."""
    found = {m.group(1): m for m in _SECTION_RE.finditer(text)}
    if set(found) != {"ANALYSIS", "SUMMARY", "RULES"}:
        return None
    m = found["RULES"]
    if not m.start() > found["SUMMARY"].start() > found["ANALYSIS"].start():
        return None
    body = text[m.end():]
    rules = [ln.strip() for ln in body.splitlines() if ln.strip()]
    return rules or None


def sample_rows(buffer: Mapping[str, ReplayRow], n: int, seed: int, task_index: int, role: Role) -> list[ReplayRow]:
    mature = [buffer[k] for k in sorted(buffer) if buffer[k].mature]
    rng = random.Random(f"{seed}:{task_index}:{role.value}")
    return rng.sample(mature, min(n, len(mature)))


def update_role_rules(role: Role, rules: MetaRuleSet, buffer: Mapping[str, ReplayRow], sample_n: int,
                      oracle: OracleClient, seed: int = 0, task_index: int = 0,
                      evidence_limit: int = 4000) -> tuple[MetaRuleSet, bool]:
    """One meta-evolving step for ``role``; returns the rules and whether the
    oracle was consulted. Any failure leaves ``rules`` unchanged."""
    role = Role(role)
    rows = sample_rows(buffer, sample_n, seed, task_index, role)
    if not rows:
        return rules, False
    prompt = render("meta", role=role.value, rules=render_rules(rules.rules),
                    evidence=truncate(evidence_digest(rows), evidence_limit))
    try:
        raw = oracle.chat(user_request("meta", prompt, temperature=0.7))
    except SkillforgeError as exc:
        log.warning("meta update for %s failed: %s", role.value, exc)
        return rules, True
    parsed = parse_meta_response(raw)
    if parsed is None:
        return rules, True
    new = MetaRuleSet.build(role, parsed, task_index)
    if not new.rules:
        return rules, True
    assert len(new.rules) <= MAX_RULES
    return new, True
