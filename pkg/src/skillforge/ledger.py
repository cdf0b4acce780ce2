"""Credit ledger records, the replayable credit table and gate results."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .model import CreditEvent, Judgment


@dataclass(frozen=True)
class LedgerRecord:
    """One append-only ledger line; ``kind`` is ``credit`` or ``exposure``."""

    ordinal: int
    kind: str
    task_id: str
    skill_id: str
    version: int
    judgment: str = ""
    scope_digest: str = ""
    retrieved: int = 0

    def to_dict(self) -> dict:
        return {
            "judgment": self.judgment,
            "kind": self.kind,
            "ord": self.ordinal,
            "retrieved": self.retrieved,
            "scope": self.scope_digest,
            "skill": self.skill_id,
            "task": self.task_id,
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LedgerRecord":
        return cls(int(d["ord"]), d["kind"], d["task"], d["skill"], int(d["version"]),
                   d.get("judgment", ""), d.get("scope", ""), int(d.get("retrieved", 0)))


@dataclass
class CreditCounts:
    helpful: int = 0
    harmful: int = 0
    neutral: int = 0
    uncertain: int = 0
    exposed: int = 0
    retrieved: int = 0
    used: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CreditTable:
    """Per skill-version counters; a pure fold over ledger records."""

    counts: dict[tuple[str, int], CreditCounts] = field(default_factory=dict)

    def get(self, skill_id: str, version: int) -> CreditCounts:
        return self.counts.get((skill_id, version)) or CreditCounts()

    def apply(self, rec: LedgerRecord) -> None:
        c = self.counts.setdefault((rec.skill_id, rec.version), CreditCounts())
        if rec.kind == "exposure":
            c.exposed += 1
            c.retrieved += rec.retrieved
        elif rec.kind == "credit":
            j = Judgment(rec.judgment)
            setattr(c, j.value, getattr(c, j.value) + 1)
            if j in (Judgment.HELPFUL, Judgment.HARMFUL):
                c.used += 1
        else:
            raise ValueError(f"unknown ledger record kind {rec.kind!r}")

    def apply_events(self, events: Iterable[CreditEvent]) -> "CreditTable":
        for e in events:
            self.apply(LedgerRecord(0, "credit", e.task_id, e.skill_id, e.version, e.judgment.value))
        return self

    @classmethod
    def replay(cls, records: Iterable[LedgerRecord]) -> "CreditTable":
        t = cls()
        for r in records:
            t.apply(r)
        return t

    def to_dict(self) -> dict:
        return {f"{k[0]}@v{k[1]}": v.to_dict() for k, v in sorted(self.counts.items())}

    def __eq__(self, other) -> bool:
        if not isinstance(other, CreditTable):
            return NotImplemented
        keys = set(self.counts) | set(other.counts)
        return all(self.get(*k) == other.get(*k) for k in keys)


@dataclass(frozen=True)
class GateResult:
    passed: bool
    case_results: tuple[tuple[str, bool], ...] = ()
    failure_digest: str = ""

    def to_dict(self) -> dict:
        return {
            "case_results": [[k, ok] for k, ok in self.case_results],
            "failure_digest": self.failure_digest,
            "passed": self.passed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GateResult":
        return cls(bool(d["passed"]), tuple((k, bool(ok)) for k, ok in d["case_results"]),
                   d["failure_digest"])
