"""Versioned skill repository with a single-writer mutation contract.

On-disk layout (all text, canonical JSON unless noted)::

    repo/skills/<id>/v<N>.skill     skill version + lifecycle + gate + evidence
    repo/bundles/<id>/v<N>.bundle   test bundle of that version
    repo/credit.ledger              append-only JSON lines + checksum trailer
    repo/buffers/<role>.buffer      role replay rows, JSON lines + trailer
    repo/meta/<role>.rules          numbered rule lines
    repo/graph.snapshot             overlap graph, weights at 6 decimals
    repo/config                     RunConfig
    repo/state                      id counter, task counter, meta freeze flag
    repo/MANIFEST                   sha256 of every file above
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

from .errors import CorruptRepository, DuplicateVersion, IllegalState, InvalidCandidate, UnknownSkill
from .graph import GraphParams, OverlapGraph
from .ledger import CreditTable, GateResult, LedgerRecord
from .model import (
    EvidenceState,
    LifecycleEvent,
    LifecycleState,
    MetaRuleSet,
    ReplayRow,
    Role,
    Skill,
    TestBundle,
    UsageStats,
    normalize_rule,
    transition,
    validate_skill,
)
from .retrieval import SkillRetrievalView

PENDING_ID = "pending"


@dataclass(frozen=True)
class RunConfig:
    K: int = 3
    k_micro: int = 1
    k_macro: int = 5
    extractor_samples: int = 3
    tau_filter: int = 2
    tau_protect: int = 1
    lambda_sparse: float = 0.30
    lambda_emb: float = 0.40
    lambda_tool: float = 0.20
    lambda_trust: float = 0.10
    alpha: float = 0.45
    beta: float = 0.35
    gamma: float = 0.20
    eta: float = 0.18
    error_weight: float = 1.7
    clique_min: int = 3
    clique_max: int = 6
    top_k_groups: int = 4
    window_tasks: int = 25
    buffer_sample_n: int = 20
    maturity_min_exposures: int = 3
    retry_budget: int = 2
    refine_attempts_per_window: int = 2
    bundle_cap: int = 12
    max_rounds: int = 20
    parallel_tasks: int = 5
    trace_limit: int = 8000
    body_limit: int = 2000
    evidence_limit: int = 4000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.K < 0 or self.k_micro < 1 or self.k_macro < 1 or self.extractor_samples < 1:
            raise ValueError("K >= 0, cadences >= 1 and extractor_samples >= 1 required")
        if self.clique_min < 2 or self.clique_max < self.clique_min:
            raise ValueError("need 2 <= clique_min <= clique_max")

    @property
    def weights(self) -> tuple[float, float, float, float]:
        return (self.lambda_sparse, self.lambda_emb, self.lambda_tool, self.lambda_trust)

    @property
    def graph_params(self) -> GraphParams:
        return GraphParams(self.alpha, self.beta, self.gamma, self.eta, self.error_weight, self.window_tasks)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SkillRecord:
    skill: Skill
    state: LifecycleState
    bundle: TestBundle
    gate: GateResult
    history: tuple[str, ...] = ()

    def with_state(self, state: LifecycleState, note: str) -> "SkillRecord":
        return replace(self, state=state, history=self.history + (note,))


@dataclass
class Repository:
    config: RunConfig = field(default_factory=RunConfig)
    skills: dict[str, list[SkillRecord]] = field(default_factory=dict)
    evidence: dict[str, EvidenceState] = field(default_factory=dict)
    meta: dict[Role, MetaRuleSet] = field(default_factory=lambda: {r: MetaRuleSet(r) for r in Role})
    buffers: dict[Role, dict[str, ReplayRow]] = field(default_factory=lambda: {r: {} for r in Role})
    graph: OverlapGraph | None = None
    ledger: list[LedgerRecord] = field(default_factory=list)
    table: CreditTable = field(default_factory=CreditTable)
    next_id: int = 1
    tasks_seen: int = 0
    freeze_meta: bool = False
    refactored: set[str] = field(default_factory=set)  # digests of groups already sent to the refactorer

    def __post_init__(self) -> None:
        if self.graph is None:
            self.graph = OverlapGraph(self.config.graph_params)

    # -- queries -------------------------------------------------------
    def versions(self, skill_id: str) -> list[SkillRecord]:
        try:
            return self.skills[skill_id]
        except KeyError:
            raise UnknownSkill(skill_id) from None

    def current(self, skill_id: str) -> SkillRecord | None:
        """The single non-archived version, if any."""
        live = [r for r in self.versions(skill_id) if r.state != LifecycleState.ARCHIVED]
        return live[-1] if live else None

    def live(self) -> Iterator[SkillRecord]:
        for sid in sorted(self.skills):
            rec = self.current(sid)
            if rec is not None:
                yield rec

    def record(self, skill_id: str, version: int) -> SkillRecord:
        for r in self.versions(skill_id):
            if r.skill.version == version:
                return r
        raise UnknownSkill(f"{skill_id}@v{version}")

    def views(self) -> list[SkillRetrievalView]:
        """Immutable retrieval views of every exposable skill."""
        out = []
        for rec in self.live():
            if rec.state in (LifecycleState.ACTIVE, LifecycleState.TRIAL):
                c = self.table.get(rec.skill.id, rec.skill.version)
                out.append(SkillRetrievalView.of(rec.skill, rec.state, c.helpful, c.harmful, c.exposed))
        return out

    # -- single-writer mutations ----------------------------------------
    def allocate_id(self) -> str:
        sid = f"sk-{self.next_id:04d}"
        self.next_id += 1
        return sid

    def _replace_record(self, rec: SkillRecord) -> None:
        hist = self.versions(rec.skill.id)
        for i, r in enumerate(hist):
            if r.skill.version == rec.skill.version:
                hist[i] = rec
                return
        raise UnknownSkill(f"{rec.skill.id}@v{rec.skill.version}")

    def apply_event(self, skill_id: str, event: LifecycleEvent, note: str = "") -> SkillRecord:
        rec = self.current(skill_id)
        if rec is None:
            raise IllegalState(f"{skill_id} has no live version")
        new_state = transition(rec.state, event)
        new = rec.with_state(new_state, note or event.value)
        self._replace_record(new)
        if new_state == LifecycleState.ARCHIVED:
            self.evidence.pop(skill_id, None)
        return new

    def set_bundle(self, skill_id: str, bundle: TestBundle) -> None:
        rec = self.current(skill_id)
        if rec is None:
            raise IllegalState(f"{skill_id} has no live version")
        if (bundle.skill_id, bundle.version) != (skill_id, rec.skill.version):
            raise ValueError("bundle targets a different skill version")
        self._replace_record(replace(rec, bundle=bundle))
        ev = self.evidence[skill_id]
        self.evidence[skill_id] = replace(ev, bundle=bundle)

    def set_gate(self, skill_id: str, gate: GateResult) -> None:
        rec = self.current(skill_id)
        if rec is None:
            raise IllegalState(f"{skill_id} has no live version")
        self._replace_record(replace(rec, gate=gate))

    def append_ledger(self, rec: LedgerRecord) -> LedgerRecord:
        rec = replace(rec, ordinal=len(self.ledger))
        self.ledger.append(rec)
        self.table.apply(rec)
        return rec


def publish(repo: Repository, candidate: Skill, bundle: TestBundle, gate: GateResult,
            task_index: int = 0, state_on_pass: LifecycleState = LifecycleState.TRIAL) -> tuple[str, int]:
    """Store a brand-new skill under a freshly allocated id.

    A passing gate stores it in ``state_on_pass``; a failing gate stores it
    archived with the failure attached."""
    if candidate.id not in ("", PENDING_ID) and candidate.id in repo.skills:
        raise DuplicateVersion(f"{candidate.id}@v{candidate.version} already stored")
    provisional = replace(candidate, id=candidate.id or PENDING_ID)
    report = validate_skill(provisional)
    if report:
        raise InvalidCandidate("; ".join(report))
    if candidate.version != 1:
        raise InvalidCandidate("new skills start at version 1")
    sid = repo.allocate_id()
    skill = replace(candidate, id=sid, created_at_task=task_index)
    bundle = bundle.retarget(sid, 1)
    if gate.passed:
        rec = SkillRecord(skill, state_on_pass, bundle, gate, (f"published:{state_on_pass.value}@t{task_index}",))
        repo.skills[sid] = [rec]
        repo.evidence[sid] = EvidenceState(bundle)
    else:
        rec = SkillRecord(skill, LifecycleState.ARCHIVED, bundle, gate, (f"rejected@t{task_index}",))
        repo.skills[sid] = [rec]
    return sid, 1


def revise(repo: Repository, skill_id: str, new_body: Skill, new_bundle: TestBundle, gate: GateResult,
           task_index: int = 0) -> int:
    """Release a revision through the gate, or archive the failed attempt.

    On release the old version is archived (superseded) and the credit
    counters start fresh for the new version; lifetime usage carries over."""
    old = repo.current(skill_id)
    if old is None or old.state not in (LifecycleState.TRIAL, LifecycleState.ACTIVE):
        raise IllegalState(f"cannot revise {skill_id} in state {old.state.value if old else 'archived'}")
    version = max(r.skill.version for r in repo.versions(skill_id)) + 1
    skill = replace(new_body, id=skill_id, version=version,
                    parent_id=f"{skill_id}@v{old.skill.version}", created_at_task=task_index)
    report = validate_skill(skill)
    if report:
        raise InvalidCandidate("; ".join(report))
    bundle = new_bundle.retarget(skill_id, version)
    if not gate.passed:
        rec = SkillRecord(skill, LifecycleState.ARCHIVED, bundle, gate, (f"revision-rejected@t{task_index}",))
        repo.versions(skill_id).append(rec)
        return version
    usage = repo.evidence[skill_id].usage
    repo.apply_event(skill_id, LifecycleEvent.SUPERSEDED, f"superseded-by-v{version}@t{task_index}")
    rec = SkillRecord(skill, old.state, bundle, gate, (f"released:{old.state.value}@t{task_index}",))
    repo.versions(skill_id).append(rec)
    repo.evidence[skill_id] = EvidenceState(bundle, (), usage)
    return version


# -- canonical serialisation ---------------------------------------------

def _dump(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n").encode("utf-8")


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _lines_with_trailer(lines: list[bytes]) -> bytes:
    body = b"".join(lines)
    return body + f"#sha256={_sha(body)}\n".encode()


def _split_trailer(data: bytes, name: str) -> list[bytes]:
    body, sep, trailer = data.rpartition(b"#sha256=")
    if not sep or not trailer.endswith(b"\n") or _sha(body) != trailer[:-1].decode(errors="replace"):
        raise CorruptRepository(f"{name}: checksum trailer mismatch")
    return [ln for ln in body.split(b"\n") if ln]


def _rules_text(rs: MetaRuleSet) -> bytes:
    return (f"# role={rs.role.value} updated_at_task={rs.updated_at_task}\n" + rs.to_text()).encode("utf-8")


def documents(repo: Repository) -> dict[str, bytes]:
    """Canonical file contents keyed by relative path (MANIFEST excluded)."""
    docs: dict[str, bytes] = {}
    for sid, hist in sorted(repo.skills.items()):
        ev = repo.evidence.get(sid)
        live = repo.current(sid)
        for rec in hist:
            v = rec.skill.version
            doc = {
                "gate": rec.gate.to_dict(),
                "history": list(rec.history),
                "skill": rec.skill.to_dict(),
                "state": rec.state.value,
            }
            if ev is not None and live is not None and live.skill.version == v:
                doc["credits"] = [c.to_dict() for c in ev.credits]
                doc["usage"] = ev.usage.to_dict()
            docs[f"skills/{sid}/v{v}.skill"] = _dump(doc)
            docs[f"bundles/{sid}/v{v}.bundle"] = _dump(rec.bundle.to_dict())
    docs["credit.ledger"] = _lines_with_trailer([_dump(r.to_dict()) for r in repo.ledger])
    for role in Role:
        rows = repo.buffers.get(role, {})
        docs[f"buffers/{role.value}.buffer"] = _lines_with_trailer([_dump(rows[k].to_dict()) for k in sorted(rows)])
        docs[f"meta/{role.value}.rules"] = _rules_text(repo.meta[role])
    docs["graph.snapshot"] = _dump(repo.graph.to_dict())
    docs["config"] = _dump(repo.config.to_dict())
    docs["state"] = _dump({"freeze_meta": repo.freeze_meta, "next_id": repo.next_id,
                           "refactored": sorted(repo.refactored), "tasks_seen": repo.tasks_seen})
    return docs


def _manifest(docs: dict[str, bytes]) -> bytes:
    return "".join(f"{_sha(docs[p])}  {p}\n" for p in sorted(docs)).encode()


def checksum(repo: Repository) -> str:
    """Digest of the canonical serialisation; equal logical state, equal digest."""
    return _sha(_manifest(documents(repo)))


def persist(repo: Repository, path: str | os.PathLike) -> str:
    """Write the repository atomically (temp dir + rename); returns its checksum."""
    path = Path(path)
    docs = documents(repo)
    manifest = _manifest(docs)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".repo-", dir=path.parent))
    try:
        for rel, data in docs.items():
            f = tmp / rel
            f.parent.mkdir(parents=True, exist_ok=True)
            f.write_bytes(data)
        (tmp / "MANIFEST").write_bytes(manifest)
        extras = []
        if path.exists():
            # keep non-repository files (call logs, reports) across rewrites
            for name in ("calls.log",):
                if (path / name).exists():
                    extras.append(name)
                    shutil.copy2(path / name, tmp / name)
            shutil.rmtree(path)
        os.replace(tmp, path)
    except OSError:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return _sha(manifest)


def _parse_rules(data: bytes, role: Role) -> MetaRuleSet:
    lines = data.decode("utf-8").splitlines()
    if not lines or not lines[0].startswith("# role="):
        raise CorruptRepository(f"meta/{role.value}.rules: missing header")
    header = dict(kv.split("=", 1) for kv in lines[0][2:].split())
    rules = [normalize_rule(ln) for ln in lines[1:] if ln.strip()]
    return MetaRuleSet(role, tuple(rules), int(header["updated_at_task"]))


def restore(path: str | os.PathLike, embed=None) -> Repository:
    """Load a repository written by :func:`persist`, verifying every checksum."""
    path = Path(path)
    try:
        manifest = (path / "MANIFEST").read_bytes()
    except OSError as exc:
        raise CorruptRepository(f"cannot read manifest: {exc}") from None
    docs: dict[str, bytes] = {}
    for line in manifest.decode("utf-8", errors="replace").splitlines():
        digest, _, rel = line.partition("  ")
        try:
            data = (path / rel).read_bytes()
        except OSError:
            raise CorruptRepository(f"missing file {rel}") from None
        if _sha(data) != digest:
            raise CorruptRepository(f"checksum mismatch in {rel}")
        docs[rel] = data
    try:
        return _from_documents(docs, embed)
    except CorruptRepository:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise CorruptRepository(f"unparseable repository: {exc!r}") from None


def _from_documents(docs: dict[str, bytes], embed=None) -> Repository:
    config = RunConfig.from_dict(json.loads(docs["config"]))
    state = json.loads(docs["state"])
    graph = OverlapGraph.from_dict(json.loads(docs["graph.snapshot"]), config.graph_params, embed)
    repo = Repository(config=config, graph=graph, next_id=state["next_id"],
                      tasks_seen=state["tasks_seen"], freeze_meta=state["freeze_meta"],
                      refactored=set(state.get("refactored", ())))
    skill_docs = sorted(
        (p for p in docs if p.startswith("skills/")),
        key=lambda p: (p.split("/")[1], int(p.rsplit("/v", 1)[1].split(".")[0])),
    )
    for p in skill_docs:
        d = json.loads(docs[p])
        sid = p.split("/")[1]
        bundle = TestBundle.from_dict(json.loads(docs[p.replace("skills/", "bundles/", 1).replace(".skill", ".bundle")]))
        rec = SkillRecord(Skill.from_dict(d["skill"]), LifecycleState(d["state"]), bundle,
                          GateResult.from_dict(d["gate"]), tuple(d["history"]))
        repo.skills.setdefault(sid, []).append(rec)
        if "usage" in d:
            from .model import CreditEvent

            repo.evidence[sid] = EvidenceState(bundle, tuple(CreditEvent.from_dict(c) for c in d["credits"]),
                                               UsageStats.from_dict(d["usage"]))
    repo.ledger = [LedgerRecord.from_dict(json.loads(ln)) for ln in _split_trailer(docs["credit.ledger"], "credit.ledger")]
    repo.table = CreditTable.replay(repo.ledger)
    for role in Role:
        rows = [ReplayRow.from_dict(json.loads(ln))
                for ln in _split_trailer(docs[f"buffers/{role.value}.buffer"], f"{role.value}.buffer")]
        repo.buffers[role] = {r.key: r for r in rows}
        repo.meta[role] = _parse_rules(docs[f"meta/{role.value}.rules"], role)
    return repo
