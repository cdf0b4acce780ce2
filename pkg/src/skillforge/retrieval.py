"""Per-turn retrieval: query construction, mixture scoring, top-K exposure and rendering."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from . import kernels
from .errors import InvalidWeights
from .model import LifecycleState
from .text import shingle_fps, tool_names, truncate

DIALOGUE_LIMIT = 600
ERROR_LIMIT = 240
ASSISTANT_LIMIT = 240
MAX_ERRORS = 3
BODY_SUMMARY_LIMIT = 240

DEFAULT_WEIGHTS = (0.30, 0.40, 0.20, 0.10)


@dataclass(frozen=True)
class RetrievalQuery:
    request_text: str
    dialogue_state_digest: str = ""
    recent_tool_errors: tuple[str, ...] = ()
    previous_assistant_digest: str = ""

    @property
    def text(self) -> str:
        parts = [self.request_text, self.dialogue_state_digest, *self.recent_tool_errors,
                 self.previous_assistant_digest]
        return "\n".join(p for p in parts if p)

    def tools(self) -> set[str]:
        return tool_names(self.text)


def build_query(task_context, turn_index: int, trace_so_far) -> RetrievalQuery:
    """Query for ``turn_index`` from the task's instruction, that turn's
    request, and the steps recorded so far."""
    request = task_context.request_for(turn_index)
    steps = list(getattr(trace_so_far, "steps", trace_so_far) or ())
    history = [f"{s.action} -> {s.observation}" for s in steps]
    dialogue = task_context.instruction
    if history:
        dialogue += "\n" + "\n".join(history)
    # keep the tail: the most recent state matters most
    if len(dialogue) > DIALOGUE_LIMIT:
        dialogue = dialogue[-DIALOGUE_LIMIT:]
    errors = tuple(truncate(s.observation, ERROR_LIMIT) for s in steps if s.observation.startswith("error:"))
    prev = truncate(steps[-1].action, ASSISTANT_LIMIT) if steps else ""
    return RetrievalQuery(request, dialogue, errors[-MAX_ERRORS:], prev)


@dataclass(frozen=True)
class SkillRetrievalView:
    id: str
    version: int
    name: str
    description: str
    trigger_conditions: tuple[str, ...]
    allowed_tools: frozenset[str]
    domains: frozenset[str]
    body_summary: str
    helpful: int = 0
    harmful: int = 0
    exposed: int = 0
    state: LifecycleState = LifecycleState.ACTIVE
    body: str = ""

    @classmethod
    def of(cls, skill, state: LifecycleState, helpful: int = 0, harmful: int = 0, exposed: int = 0):
        return cls(
            skill.id,
            skill.version,
            skill.name,
            skill.description,
            tuple(skill.trigger_conditions),
            frozenset(skill.allowed_tools),
            frozenset(skill.domains),
            truncate(skill.body, BODY_SUMMARY_LIMIT),
            helpful,
            harmful,
            exposed,
            LifecycleState(state),
            skill.body,
        )

    @property
    def lexical_text(self) -> str:
        return " ".join([self.name.replace("_", " "), self.description, *self.trigger_conditions])

    @property
    def semantic_text(self) -> str:
        return " ".join([self.lexical_text, " ".join(sorted(self.domains)), self.body_summary])

    @property
    def exposable(self) -> bool:
        return self.state in (LifecycleState.ACTIVE, LifecycleState.TRIAL)


@dataclass(frozen=True)
class ScoreBreakdown:
    total: float
    sparse: float
    emb: float
    tool: float
    trust: float


def check_weights(weights: Sequence[float]) -> tuple[float, float, float, float]:
    if len(weights) != 4:
        raise InvalidWeights(f"need 4 weights, got {len(weights)}")
    if any(w < 0 or math.isnan(w) for w in weights):
        raise InvalidWeights(f"weights must be non-negative: {weights}")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise InvalidWeights(f"weights must sum to 1, got {sum(weights)}")
    return tuple(float(w) for w in weights)  # type: ignore[return-value]


def combine(components: Sequence[float], weights: Sequence[float]) -> float:
    w1, w2, w3, w4 = check_weights(weights)
    for c in components:
        if not 0.0 <= c <= 1.0:
            raise ValueError(f"component score out of [0,1]: {c}")
    s, e, t, r = components
    return w1 * s + w2 * e + w3 * t + w4 * r


def trust_score(helpful: int, harmful: int, state: LifecycleState) -> float:
    base = (helpful + 1) / (helpful + harmful + 2)
    return base * 0.5 if state == LifecycleState.TRIAL else base


def tool_score(query_tools: set[str], allowed: frozenset[str]) -> float:
    if not allowed:
        return 0.5
    return len(query_tools & allowed) / max(1, len(query_tools))


def score(q: RetrievalQuery, v: SkillRetrievalView, weights=DEFAULT_WEIGHTS, embed=None) -> ScoreBreakdown:
    """Mixture of lexical, embedding, tool-compatibility and trust scores."""
    if embed is None:
        embed = _default_embedder().embed
    sparse = kernels.jaccard_sorted(shingle_fps(q.text), shingle_fps(v.lexical_text))
    cos = kernels.dot(embed(q.text), embed(v.semantic_text))
    emb = min(1.0, max(0.0, (cos + 1.0) / 2.0))
    tool = tool_score(q.tools(), v.allowed_tools)
    trust = trust_score(v.helpful, v.harmful, v.state)
    return ScoreBreakdown(combine((sparse, emb, tool, trust), weights), sparse, emb, tool, trust)


_EMBEDDER = None


def _default_embedder():
    global _EMBEDDER
    if _EMBEDDER is None:
        from .oracle import HashingEmbedder

        _EMBEDDER = HashingEmbedder()
    return _EMBEDDER


def _rank_key(v: SkillRetrievalView, s: ScoreBreakdown, mode: str):
    tier = 0 if v.state == LifecycleState.ACTIVE else 1
    return (tier, -s.total, -s.trust, v.id)


def eligible(v: SkillRetrievalView, mode: str) -> bool:
    if mode == "heldout":
        return v.state == LifecycleState.ACTIVE
    if mode == "training":
        return v.exposable
    raise ValueError(f"unknown retrieval mode {mode!r}")


def select_top_k(
    q: RetrievalQuery,
    views: Iterable[SkillRetrievalView],
    K: int,
    mode: str = "training",
    weights=DEFAULT_WEIGHTS,
    embed=None,
    scorer: Callable[[RetrievalQuery, SkillRetrievalView], ScoreBreakdown] | None = None,
) -> list[tuple[SkillRetrievalView, ScoreBreakdown]]:
    """Top-``K`` exposable skills. Active skills always outrank trial skills;
    ties go to higher trust, then the lexicographically smaller id."""
    if K <= 0:
        return []
    check_weights(weights)
    if scorer is None:
        scorer = lambda qq, vv: score(qq, vv, weights, embed)  # noqa: E731
    scored = [(v, scorer(q, v)) for v in views if eligible(v, mode)]
    return heapq.nsmallest(K, scored, key=lambda p: _rank_key(p[0], p[1], mode))


SKILL_BLOCK_HEADER = "RELEVANT SKILLS (guidance only; not callable tools):"


def render_skill(v: SkillRetrievalView) -> str:
    trig = "; ".join(v.trigger_conditions)
    return f'<<skill id="{v.id}" v={v.version} name="{v.name}">>\ntrigger: {trig}\n{v.body}\n<</skill>>'


def render_skills(views: Sequence[SkillRetrievalView]) -> str:
    """Prompt block for the exposed skills; empty string when none."""
    if not views:
        return ""
    return SKILL_BLOCK_HEADER + "\n" + "\n".join(render_skill(v) for v in views) + "\n"
