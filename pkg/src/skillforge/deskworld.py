"""Deskworld: a small multi-turn tool-calling environment with hidden contracts.

Every family is a desk (``orders``, ``fleet``, ...) exposing five tools:

* ``<d>_lookup(item)`` returns ``ref=...`` that later calls must reuse;
* ``<d>_submit(item, ref, account)`` needs a hidden family constant
  ``account`` that only an error observation reveals;
* ``<d>_confirm(ref)``;
* ``<d>_activate(mode)`` silently requires ``<d>_unlock(level=L)`` first;
* ``<d>_status()``.

``support_escalate_ticket(priority)`` is offered everywhere and never needed.

A turn presents a request ending in ``[call: T(a=v, b=?)]``. The environment
answers each emitted call with ``ok: ...``, ``error: ...`` or ``warning: ...``
and moves to the next turn once the turn's expected calls are matched or the
attempt budget runs out.
"""
from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .text import digest

DOMAINS = (
    "orders", "billing", "fleet", "library", "payroll", "inventory", "travel", "clinic",
    "studio", "garden", "harbor", "archive", "lab", "kitchen", "parking", "campus",
    "hangar", "vault", "theater", "museum", "mailroom", "pharmacy", "gym", "hotel",
    "warehouse", "bakery", "dock", "observatory", "greenhouse", "workshop", "radio", "courier",
)
ITEMS = ("ledger", "badge", "crate", "permit", "invoice", "manual", "sensor", "voucher",
         "cable", "folder", "sample", "token", "pallet", "lens", "kit", "drive")
MODES = ("night", "eco", "audit", "rush", "quiet", "service")
ESCALATE = "support_escalate_ticket"
URGENT_SENTENCE = "This is an urgent request from the user."
ATTEMPTS_PER_TURN = 4

_CALL_RE = re.compile(r"^\s*CALL\s+([A-Za-z_][A-Za-z0-9_]*)\((.*)\)\s*$")
_ARG_RE = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*([^,]*)")


def canonical(name: str, args: dict[str, str] | Iterable[tuple[str, str]]) -> str:
    items = sorted(dict(args).items())
    return f"{name}({', '.join(f'{k}={v}' for k, v in items)})"


def parse_call(text: str) -> tuple[str, dict[str, str]] | None:
    """``(name, args)`` for an action line ``CALL name(a=v, ...)``, else ``None``."""
    m = _CALL_RE.match(text.strip().splitlines()[0] if text.strip() else "")
    if not m:
        return None
    name, raw = m.group(1), m.group(2).strip()
    args: dict[str, str] = {}
    if raw:
        for part in raw.split(","):
            am = _ARG_RE.fullmatch(part)
            if not am:
                return None
            args[am.group(1)] = am.group(2).strip()
    return name, args


def split_call(call: str) -> tuple[str, dict[str, str]]:
    parsed = parse_call("CALL " + call)
    if parsed is None:
        raise ValueError(f"not a call: {call!r}")
    return parsed


@dataclass(frozen=True)
class Family:
    name: str
    account: str
    level: int

    def tools(self) -> tuple[str, ...]:
        d = self.name
        return (f"{d}_lookup(item)", f"{d}_submit(item, ref, account)", f"{d}_confirm(ref)",
                f"{d}_unlock(level)", f"{d}_activate(mode)", f"{d}_status()", f"{ESCALATE}(priority)")

    def to_dict(self) -> dict:
        return {"account": self.account, "level": self.level, "name": self.name}

    @classmethod
    def from_dict(cls, d: dict) -> "Family":
        return cls(d["name"], d["account"], int(d["level"]))


@dataclass(frozen=True)
class Turn:
    request: str
    expected: tuple[str, ...]
    hidden: tuple[str, ...] = ()  # argument names only an error reveals
    precondition: str = ""  # call that must precede the requested one

    def to_dict(self) -> dict:
        return {"expected": list(self.expected), "hidden": list(self.hidden),
                "precondition": self.precondition, "request": self.request}

    @classmethod
    def from_dict(cls, d: dict) -> "Turn":
        return cls(d["request"], tuple(d["expected"]), tuple(d.get("hidden", ())), d.get("precondition", ""))


@dataclass(frozen=True)
class DeskworldTask:
    id: str
    family: str
    instruction: str
    turns: tuple[Turn, ...]
    tools: tuple[str, ...]
    urgent: bool = False
    distractors: tuple[str, ...] = (ESCALATE,)

    def request_for(self, turn_index: int) -> str:
        return self.turns[turn_index].request

    @property
    def expected_calls(self) -> tuple[str, ...]:
        return tuple(c for t in self.turns for c in t.expected)

    def to_dict(self) -> dict:
        return {
            "distractors": list(self.distractors),
            "family": self.family,
            "id": self.id,
            "instruction": self.instruction,
            "tools": list(self.tools),
            "turns": [t.to_dict() for t in self.turns],
            "urgent": self.urgent,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeskworldTask":
        return cls(d["id"], d["family"], d["instruction"], tuple(Turn.from_dict(t) for t in d["turns"]),
                   tuple(d["tools"]), bool(d.get("urgent", False)), tuple(d.get("distractors", (ESCALATE,))))


def make_task(task_id: str, fam: Family, kind: str, item: str, mode: str, urgent: bool) -> DeskworldTask:
    d = fam.name
    ref = "R" + digest(f"{d}:{item}", 6).upper()
    turns: list[Turn] = []
    if kind in ("order", "full"):
        turns.append(Turn(f"Look up the {item} at the {d} desk. [call: {d}_lookup(item={item})]",
                          (canonical(f"{d}_lookup", {"item": item}),)))
        turns.append(Turn(f"Submit the {item} for processing. [call: {d}_submit(item={item}, ref=?, account=?)]",
                          (canonical(f"{d}_submit", {"item": item, "ref": ref, "account": fam.account}),),
                          hidden=("account",)))
        turns.append(Turn(f"Confirm the submission. [call: {d}_confirm(ref=?)]",
                          (canonical(f"{d}_confirm", {"ref": ref}),)))
    if kind in ("mode", "full"):
        unlock = canonical(f"{d}_unlock", {"level": str(fam.level)})
        turns.append(Turn(f"Switch the {d} desk to {mode} mode. [call: {d}_activate(mode={mode})]",
                          (unlock, canonical(f"{d}_activate", {"mode": mode})), precondition=unlock))
    if kind == "mode":
        turns.append(Turn(f"Report the {d} desk status. [call: {d}_status()]", (canonical(f"{d}_status", {}),)))
    instruction = f"Handle a {d} desk request about the {item}."
    if urgent:
        instruction += " " + URGENT_SENTENCE
    return DeskworldTask(task_id, d, instruction, tuple(turns), fam.tools(), urgent)


@dataclass
class DeskworldEnv:
    """Stateful episode over one task; ``step`` consumes one emitted action."""

    task: DeskworldTask
    attempts_per_turn: int = ATTEMPTS_PER_TURN
    turn: int = 0
    _remaining: list[str] = field(default_factory=list)
    _attempts: int = 0

    def __post_init__(self) -> None:
        self._load_turn()

    def _load_turn(self) -> None:
        self._remaining = list(self.task.turns[self.turn].expected) if self.turn < len(self.task.turns) else []
        self._attempts = 0

    @property
    def done(self) -> bool:
        return self.turn >= len(self.task.turns)

    def _advance_if_needed(self) -> None:
        if not self._remaining or self._attempts >= self.attempts_per_turn:
            self.turn += 1
            self._load_turn()

    def step(self, action: str) -> str:
        if self.done:
            raise RuntimeError("episode finished")
        self._attempts += 1
        obs = self._observe(action)
        self._advance_if_needed()
        return obs

    def _observe(self, action: str) -> str:
        parsed = parse_call(action)
        if parsed is None:
            return "error: unparseable action"
        name, args = parsed
        call = canonical(name, args)
        t = self.task.turns[self.turn]
        if self._remaining and call == self._remaining[0]:
            self._remaining.pop(0)
            return "ok: " + self._result(name, args)
        if not self._remaining:
            return f"warning: {name} was not needed"
        want_name, want_args = split_call(self._remaining[0])
        if t.precondition and self._remaining[0] == t.precondition and len(self._remaining) > 1:
            target = split_call(self._remaining[1])[0]
            if name == target:
                return f"error: {target} requires {t.precondition} before {target}"
        if name == want_name:
            for a in sorted(want_args):
                if args.get(a) != want_args[a]:
                    if a in t.hidden:
                        return f"error: {name} requires {name}.{a}={want_args[a]}"
                    return f"error: {name} rejected {a}={args.get(a, '')}"
            return f"error: {name} rejected unexpected arguments"
        return f"warning: {name} was not needed"

    def _result(self, name: str, args: dict[str, str]) -> str:
        d, _, op = name.partition("_")
        if op == "lookup":
            return "ref=R" + digest(f"{d}:{args['item']}", 6).upper()
        if op == "submit":
            return f"submitted {args['item']}"
        if op == "confirm":
            return "confirmed"
        if op == "unlock":
            return f"unlocked level {args['level']}"
        if op == "activate":
            return f"mode={args['mode']}"
        if op == "status":
            return "status=ready"
        return "done"


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class Utility:
    score: float
    matched: int
    emitted: int
    expected: int
    precision: float
    recall: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def call_utility(emitted: Sequence[str], expected: Sequence[str]) -> Utility:
    """F1 of order-preserving exact matches between emitted and expected calls."""
    m = lcs_length(emitted, expected)
    if not emitted and not expected:
        return Utility(1.0, 0, 0, 0, 1.0, 1.0)
    p = m / len(emitted) if emitted else 0.0
    r = m / len(expected) if expected else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return Utility(f, m, len(emitted), len(expected), p, r)


@dataclass
class Suite:
    families: list[Family]
    transfer_families: list[Family]
    train: list[DeskworldTask]
    heldout: list[DeskworldTask]
    transfer_train: list[DeskworldTask]
    transfer_heldout: list[DeskworldTask]

    SPLITS = ("train", "heldout", "transfer_train", "transfer_heldout")

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for split in self.SPLITS:
            p = out / f"{split}.json"
            save_tasks(getattr(self, split), p)
            paths.append(p)
        fam = {"families": [f.to_dict() for f in self.families],
               "transfer_families": [f.to_dict() for f in self.transfer_families]}
        (out / "families.json").write_text(json.dumps(fam, indent=1, sort_keys=True) + "\n")
        paths.append(out / "families.json")
        return paths


def _urgent(i: int) -> bool:
    # three urgent tasks in every block of five
    return i % 5 in (0, 2, 3)


def _tasks(prefix: str, fams: list[Family], n: int, kinds: Sequence[str], rng: random.Random) -> list[DeskworldTask]:
    order = list(fams)
    rng.shuffle(order)
    out = []
    for i in range(n):
        fam = order[i % len(order)]
        out.append(make_task(f"{prefix}-{i:03d}", fam, kinds[i % len(kinds)], rng.choice(ITEMS),
                             rng.choice(MODES), _urgent(i)))
    return out


def generate(families: int = 20, seed: int = 0, train_tasks: int = 50, heldout_tasks: int = 20,
             transfer_train_tasks: int = 25, transfer_heldout_tasks: int = 10) -> Suite:
    """Deterministic suite; the last ``max(1, families // 5)`` families form the transfer split."""
    if not 2 <= families <= len(DOMAINS):
        raise ValueError(f"families must be in [2, {len(DOMAINS)}]")
    rng = random.Random(seed)
    names = rng.sample(DOMAINS, families)
    fams = [Family(n, f"ACC-{rng.randrange(100, 1000)}", rng.randrange(1, 6)) for n in names]
    n_transfer = max(1, families // 5)
    base, transfer = fams[:-n_transfer], fams[-n_transfer:]
    return Suite(
        base,
        transfer,
        _tasks("train", base, train_tasks, ("full", "order", "mode"), rng),
        _tasks("heldout", base, heldout_tasks, ("full",), rng),
        _tasks("xtrain", transfer, transfer_train_tasks, ("full", "order", "mode"), rng),
        _tasks("xheldout", transfer, transfer_heldout_tasks, ("full",), rng),
    )


def save_tasks(tasks: Iterable[DeskworldTask], path: str | Path) -> None:
    doc = {"tasks": [t.to_dict() for t in tasks]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_tasks(path: str | Path, split: str = "train") -> list[DeskworldTask]:
    """Tasks from a JSON file, or from ``<dir>/<split>.json`` for a suite directory."""
    p = Path(path)
    if p.is_dir():
        p = p / f"{split}.json"
    doc = json.loads(p.read_text())
    items = doc["tasks"] if isinstance(doc, dict) else doc
    return [DeskworldTask.from_dict(t) for t in items]
