"""Persistent domain types and the skill lifecycle state machine."""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

from .errors import IllegalTransition


class Semantics(str, Enum):
    CALLABLE_FUNCTION = "callable_function"
    WORKFLOW = "workflow"
    KNOWLEDGE = "knowledge"


class Role(str, Enum):
    EXTRACTOR = "extractor"
    REFACTORER = "refactorer"
    REFINER = "refiner"


class LifecycleState(str, Enum):
    TRIAL = "trial"
    ACTIVE = "active"
    DISABLED = "disabled"
    ARCHIVED = "archived"


class LifecycleEvent(str, Enum):
    GATE_PASS = "gate_pass"
    GATE_FAIL = "gate_fail"
    FILTER_DISABLE = "filter_disable"
    SUPERSEDED = "superseded"
    RETIRE = "retire"


class Judgment(str, Enum):
    HELPFUL = "helpful"
    HARMFUL = "harmful"
    NEUTRAL = "neutral"
    UNCERTAIN = "uncertain"


class CaseKind(str, Enum):
    UNIT = "unit"
    INTEGRATION = "integration"
    NEGATIVE = "negative"


S, E = LifecycleState, LifecycleEvent

TRANSITIONS: dict[tuple[LifecycleState, LifecycleEvent], LifecycleState] = {
    (S.TRIAL, E.GATE_PASS): S.ACTIVE,
    (S.TRIAL, E.GATE_FAIL): S.ARCHIVED,
    # a released revision of a trial skill replaces it
    (S.TRIAL, E.SUPERSEDED): S.ARCHIVED,
    (S.ACTIVE, E.FILTER_DISABLE): S.DISABLED,
    (S.ACTIVE, E.SUPERSEDED): S.ARCHIVED,
    (S.DISABLED, E.RETIRE): S.ARCHIVED,
}


def transition(state: LifecycleState, event: LifecycleEvent) -> LifecycleState:
    """Next lifecycle state; raises :class:`IllegalTransition` off the table."""
    try:
        return TRANSITIONS[(LifecycleState(state), LifecycleEvent(event))]
    except KeyError:
        raise IllegalTransition(f"{state.value} --{event.value}-->") from None


@dataclass(frozen=True)
class Skill:
    id: str
    version: int
    semantics: Semantics
    name: str
    description: str
    body: str
    source_role: Role
    trigger_conditions: tuple[str, ...] = ()
    allowed_tools: frozenset[str] = frozenset()
    domains: frozenset[str] = frozenset()
    parent_id: str | None = None
    created_at_task: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "allowed_tools": sorted(self.allowed_tools),
            "body": self.body,
            "created_at_task": self.created_at_task,
            "description": self.description,
            "domains": sorted(self.domains),
            "id": self.id,
            "name": self.name,
            "parent_id": self.parent_id,
            "semantics": self.semantics.value,
            "source_role": self.source_role.value,
            "trigger_conditions": list(self.trigger_conditions),
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Skill":
        return cls(
            id=d["id"],
            version=int(d["version"]),
            semantics=Semantics(d["semantics"]),
            name=d["name"],
            description=d["description"],
            body=d["body"],
            source_role=Role(d["source_role"]),
            trigger_conditions=tuple(d.get("trigger_conditions", ())),
            allowed_tools=frozenset(d.get("allowed_tools", ())),
            domains=frozenset(d.get("domains", ())),
            parent_id=d.get("parent_id"),
            created_at_task=int(d.get("created_at_task", 0)),
        )

    def signature(self) -> str:
        return f"{self.name} | {'; '.join(self.trigger_conditions)}"


def validate_skill(candidate: Skill) -> list[str]:
    """Every violated invariant of ``candidate``; empty means storable."""
    report = []
    if not isinstance(candidate.id, str) or not candidate.id.strip():
        report.append("id empty")
    if not isinstance(candidate.version, int) or candidate.version < 1:
        report.append("version must be >= 1")
    try:
        Semantics(candidate.semantics)
    except ValueError:
        report.append("semantics invalid")
    try:
        role = Role(candidate.source_role)
    except ValueError:
        report.append("source role invalid")
        role = None
    needs_parent = role is Role.REFINER or (
        isinstance(candidate.version, int) and candidate.version > 1
    )
    if needs_parent and not candidate.parent_id:
        report.append("parent link required")
    if not needs_parent and candidate.parent_id:
        report.append("parent link unexpected")
    if not candidate.body or not candidate.body.strip():
        report.append("body empty")
    if not candidate.name or not candidate.name.strip():
        report.append("name empty")
    return report


@dataclass(frozen=True)
class BundleCase:
    kind: CaseKind
    input_fragment: str
    expected_behavior: str
    verdict_rule: str

    def key(self) -> tuple[str, str]:
        from .text import digest

        return (self.kind.value, digest(self.input_fragment))

    def to_dict(self) -> dict[str, Any]:
        return {
            "expected_behavior": self.expected_behavior,
            "input_fragment": self.input_fragment,
            "kind": self.kind.value,
            "verdict_rule": self.verdict_rule,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BundleCase":
        return cls(
            CaseKind(d["kind"]), d["input_fragment"], d["expected_behavior"], d["verdict_rule"]
        )


@dataclass(frozen=True)
class TestBundle:
    __test__ = False  # not a pytest class

    skill_id: str
    version: int
    cases: tuple[BundleCase, ...] = ()

    def retarget(self, skill_id: str, version: int) -> "TestBundle":
        return replace(self, skill_id=skill_id, version=version)

    def to_dict(self) -> dict[str, Any]:
        return {
            "cases": [c.to_dict() for c in self.cases],
            "skill_id": self.skill_id,
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TestBundle":
        return cls(d["skill_id"], int(d["version"]), tuple(BundleCase.from_dict(c) for c in d["cases"]))


@dataclass(frozen=True)
class CreditEvent:
    skill_id: str
    version: int
    task_id: str
    judgment: Judgment
    rationale: str = ""
    attribution_scope: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "attribution_scope": self.attribution_scope,
            "judgment": self.judgment.value,
            "rationale": self.rationale,
            "skill_id": self.skill_id,
            "task_id": self.task_id,
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CreditEvent":
        return cls(
            d["skill_id"],
            int(d["version"]),
            d["task_id"],
            Judgment(d["judgment"]),
            d.get("rationale", ""),
            d.get("attribution_scope", ""),
        )


@dataclass(frozen=True)
class UsageStats:
    retrieved_count: int = 0
    executed_count: int = 0
    exposed_count: int = 0

    def bump(self, retrieved: int = 0, executed: int = 0, exposed: int = 0) -> "UsageStats":
        if min(retrieved, executed, exposed) < 0:
            raise ValueError("usage counters are monotone")
        return UsageStats(
            self.retrieved_count + retrieved,
            self.executed_count + executed,
            self.exposed_count + exposed,
        )

    def to_dict(self) -> dict[str, int]:
        return {
            "executed_count": self.executed_count,
            "exposed_count": self.exposed_count,
            "retrieved_count": self.retrieved_count,
        }

    @classmethod
    def from_dict(cls, d: dict[str, int]) -> "UsageStats":
        return cls(d["retrieved_count"], d["executed_count"], d["exposed_count"])


@dataclass(frozen=True)
class EvidenceState:
    bundle: TestBundle
    credits: tuple[CreditEvent, ...] = ()
    usage: UsageStats = field(default_factory=UsageStats)

    def to_dict(self) -> dict[str, Any]:
        return {
            "bundle": self.bundle.to_dict(),
            "credits": [c.to_dict() for c in self.credits],
            "usage": self.usage.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EvidenceState":
        return cls(
            TestBundle.from_dict(d["bundle"]),
            tuple(CreditEvent.from_dict(c) for c in d["credits"]),
            UsageStats.from_dict(d["usage"]),
        )


MAX_RULES = 5

_NUMBERING = re.compile(r"^\s*(?:\(?\d+[.):]|[-*•])\s*")
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+(?=\S)")


def normalize_rule(text: str) -> str:
    """Trim, drop list numbering, collapse whitespace, keep the first sentence."""
    text = _NUMBERING.sub("", text.strip())
    text = " ".join(text.split())
    if not text:
        return ""
    text = _SENTENCE_END.split(text, maxsplit=1)[0]
    if text[-1] not in ".!?":
        text += "."
    return text


@dataclass(frozen=True)
class MetaRuleSet:
    role: Role
    rules: tuple[str, ...] = ()
    updated_at_task: int = 0

    def __post_init__(self) -> None:
        if len(self.rules) > MAX_RULES:
            raise ValueError(f"at most {MAX_RULES} rules per role, got {len(self.rules)}")

    @classmethod
    def build(cls, role: Role, rules, updated_at_task: int = 0) -> "MetaRuleSet":
        """Normalise, de-duplicate and cap ``rules`` at :data:`MAX_RULES`."""
        seen: list[str] = []
        for r in rules:
            n = normalize_rule(r)
            if n and n not in seen:
                seen.append(n)
        return cls(Role(role), tuple(seen[:MAX_RULES]), updated_at_task)

    def to_text(self) -> str:
        return "".join(f"{i}. {r}\n" for i, r in enumerate(self.rules, 1))


@dataclass(frozen=True)
class ReplayRow:
    """Links an artifact a role produced to the evidence observed for it."""

    role: Role
    skill_id: str
    version: int
    evidence: tuple[tuple[str, Any], ...] = ()
    mature: bool = False
    group_digest: str = ""

    @property
    def key(self) -> str:
        return f"{self.skill_id}@v{self.version}" if self.skill_id else f"group:{self.group_digest}"

    def get(self, name: str, default: Any = None) -> Any:
        return dict(self.evidence).get(name, default)

    def to_dict(self) -> dict[str, Any]:
        return {
            "evidence": {k: v for k, v in self.evidence},
            "group_digest": self.group_digest,
            "mature": self.mature,
            "role": self.role.value,
            "skill_id": self.skill_id,
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ReplayRow":
        ev = tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in d["evidence"].items()))
        return cls(Role(d["role"]), d["skill_id"], int(d["version"]), ev, bool(d["mature"]),
                   d.get("group_digest", ""))
