"""Trace projection, the weighted overlap graph and strict clique mining."""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Iterable, Sequence

from . import kernels
from .text import shingles, truncate

SEGMENT_TEXT_LIMIT = 1200
ALIGNED_MIN_COSINE = 0.6
PRECISION = 6

_ARG_RE = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)=")


def tool_family(tool: str) -> str:
    return tool.split("_", 1)[0]


@dataclass(frozen=True)
class GraphParams:
    alpha: float = 0.45
    beta: float = 0.35
    gamma: float = 0.20
    eta: float = 0.18
    error_weight: float = 1.7
    window_tasks: int = 25


@dataclass(frozen=True)
class Segment:
    id: str
    source_task_id: str
    task_index: int
    span: tuple[int, int]
    fragment_text: str
    tool_calls: tuple[str, ...] = ()
    error_texts: tuple[str, ...] = ()
    outcome_tag: str = "success"

    @property
    def tools(self) -> frozenset[str]:
        return frozenset(c.split("(", 1)[0] for c in self.tool_calls if "(" in c)

    @property
    def arg_names(self) -> tuple[str, ...]:
        return tuple(sorted(a for c in self.tool_calls for a in _ARG_RE.findall(c.split("(", 1)[-1])))


@dataclass(frozen=True)
class GraphNode:
    """A projected segment or a skill summary."""

    id: str
    kind: str  # "segment" | "skill"
    source: str  # task id for segments, skill id for skill nodes
    task_index: int
    text: str
    tools: frozenset[str] = frozenset()
    arg_names: tuple[str, ...] = ()
    error_texts: tuple[str, ...] = ()
    outcome_tag: str = ""

    @classmethod
    def from_segment(cls, s: Segment) -> "GraphNode":
        return cls(s.id, "segment", s.source_task_id, s.task_index, s.fragment_text,
                   s.tools, s.arg_names, s.error_texts, s.outcome_tag)

    @classmethod
    def from_skill(cls, skill) -> "GraphNode":
        text = " ".join([skill.name.replace("_", " "), skill.description,
                         *skill.trigger_conditions, skill.body])
        args = tuple(sorted(_ARG_RE.findall(skill.body)))
        return cls(f"skill:{skill.id}:v{skill.version}", "skill", skill.id, -1,
                   truncate(text, SEGMENT_TEXT_LIMIT), frozenset(skill.allowed_tools), args)

    def to_dict(self) -> dict:
        return {
            "arg_names": list(self.arg_names),
            "error_texts": list(self.error_texts),
            "id": self.id,
            "kind": self.kind,
            "outcome_tag": self.outcome_tag,
            "source": self.source,
            "task_index": self.task_index,
            "text": self.text,
            "tools": sorted(self.tools),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GraphNode":
        return cls(d["id"], d["kind"], d["source"], int(d["task_index"]), d["text"],
                   frozenset(d["tools"]), tuple(d["arg_names"]), tuple(d["error_texts"]),
                   d.get("outcome_tag", ""))


def project(trace, utility=None, limit: int = SEGMENT_TEXT_LIMIT) -> list[Segment]:
    """One segment per maximal run of steps sharing a tool family.

    A step whose action did not parse to a tool call belongs to the run it
    interrupts (it is part of that error episode)."""
    steps = list(trace.steps)
    if not steps:
        return []
    runs: list[tuple[str, list[int]]] = []
    for i, st in enumerate(steps):
        key = tool_family(st.tool) if st.tool else (runs[-1][0] if runs else "none")
        if runs and runs[-1][0] == key:
            runs[-1][1].append(i)
        else:
            runs.append((key, [i]))
    out = []
    for _, idx in runs:
        sel = [steps[i] for i in idx]
        requests = []
        for st in sel:
            if st.request and st.request not in requests:
                requests.append(st.request)
        lines = requests + [f"{st.action} -> {st.observation}" for st in sel]
        errors = tuple(st.observation for st in sel if st.observation.startswith("error:"))
        calls = tuple(st.action_call for st in sel if st.tool)
        if errors and len(errors) == len(sel):
            outcome = "failure"
        elif errors:
            outcome = "partial"
        else:
            outcome = "success"
        out.append(Segment(
            id=f"{trace.task_id}#{idx[0]}-{idx[-1]}",
            source_task_id=trace.task_id,
            task_index=trace.task_index,
            span=(idx[0], idx[-1]),
            fragment_text=truncate("\n".join(lines), limit),
            tool_calls=calls,
            error_texts=errors,
            outcome_tag=outcome,
        ))
    return out


class _Features:
    __slots__ = ("fps", "emb", "err")

    def __init__(self, node: GraphNode, embed) -> None:
        self.fps = kernels.fingerprints(shingles(node.text))
        self.emb = embed(node.text)
        err_sh: list[str] = []
        for e in node.error_texts:
            err_sh.extend(shingles(e))
        self.err = kernels.fingerprints(err_sh)


def _default_embed():
    from .oracle import HashingEmbedder

    return HashingEmbedder().embed


@dataclass
class OverlapGraph:
    params: GraphParams = field(default_factory=GraphParams)
    nodes: dict[str, GraphNode] = field(default_factory=dict)
    edges: dict[tuple[str, str], float] = field(default_factory=dict)
    embed: Callable | None = field(default=None, repr=False, compare=False)
    _feat: dict = field(default_factory=dict, repr=False, compare=False)
    _adj: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.embed is None:
            self.embed = _default_embed()
        self._rebuild_adjacency()

    def _rebuild_adjacency(self) -> None:
        self._adj = {n: set() for n in self.nodes}
        for u, v in self.edges:
            self._adj[u].add(v)
            self._adj[v].add(u)

    def features(self, node_id: str) -> _Features:
        f = self._feat.get(node_id)
        if f is None:
            f = self._feat[node_id] = _Features(self.nodes[node_id], self.embed)
        return f

    def neighbors(self, node_id: str) -> set[str]:
        return self._adj.get(node_id, set())

    def weight(self, u: str, v: str) -> float | None:
        return self.edges.get((u, v) if u < v else (v, u))

    def degree(self, node_id: str) -> int:
        return len(self.neighbors(node_id))

    def provenance(self) -> dict[str, str]:
        return {n.id: n.source for n in self.nodes.values()}

    def remove_node(self, node_id: str) -> None:
        if node_id not in self.nodes:
            return
        for nb in self._adj.pop(node_id, set()):
            self._adj[nb].discard(node_id)
            self.edges.pop((node_id, nb) if node_id < nb else (nb, node_id), None)
        del self.nodes[node_id]
        self._feat.pop(node_id, None)

    def insert(self, node: GraphNode) -> bool:
        """Add ``node`` and every edge to it that clears the threshold."""
        if node.id in self.nodes:
            return False
        others = sorted(self.nodes)
        self.nodes[node.id] = node
        self._adj[node.id] = set()
        if not others:
            return True
        p = self.params
        f = self.features(node.id)
        feats = [self.features(o) for o in others]
        ws = kernels.weights_against(f.fps, f.emb, f.err, [(g.fps, g.emb, g.err) for g in feats],
                                     p.alpha, p.beta, p.gamma, p.error_weight)
        for o, w in zip(others, ws):
            if w >= p.eta:
                key = (node.id, o) if node.id < o else (o, node.id)
                self.edges[key] = round(w, PRECISION)
                self._adj[node.id].add(o)
                self._adj[o].add(node.id)
        return True

    def to_dict(self) -> dict:
        adjacency = {}
        for (u, v), w in sorted(self.edges.items()):
            adjacency.setdefault(u, []).append([v, f"{w:.{PRECISION}f}"])
        return {
            "adjacency": adjacency,
            "nodes": [self.nodes[k].to_dict() for k in sorted(self.nodes)],
        }

    @classmethod
    def from_dict(cls, d: dict, params: GraphParams | None = None, embed=None) -> "OverlapGraph":
        nodes = {n["id"]: GraphNode.from_dict(n) for n in d["nodes"]}
        edges = {}
        for u, lst in d["adjacency"].items():
            for v, w in lst:
                edges[(u, v)] = float(w)
        return cls(params or GraphParams(), nodes, edges, embed)


def edge_weight(u: GraphNode | Segment, v: GraphNode | Segment, params: GraphParams | None = None,
                embed=None) -> float:
    """alpha*sparse + beta*emb + gamma*err for two nodes (no thresholding)."""
    params = params or GraphParams()
    embed = embed or _default_embed()
    a = u if isinstance(u, GraphNode) else GraphNode.from_segment(u)
    b = v if isinstance(v, GraphNode) else GraphNode.from_segment(v)
    fa, fb = _Features(a, embed), _Features(b, embed)
    return kernels.pair_weight(fa.fps, fb.fps, fa.emb, fb.emb, fa.err, fb.err,
                               params.alpha, params.beta, params.gamma, params.error_weight)


def update_graph(graph: OverlapGraph, new_segments: Iterable[Segment], skills: Iterable) -> OverlapGraph:
    """Insert new segments, sync skill-summary nodes, slide the task window."""
    for seg in sorted(new_segments, key=lambda s: s.id):
        graph.insert(GraphNode.from_segment(seg))
    wanted = {}
    for s in skills:
        node = GraphNode.from_skill(s)
        wanted[node.id] = node
    for nid in [n for n, node in graph.nodes.items() if node.kind == "skill" and n not in wanted]:
        graph.remove_node(nid)
    task_idx = sorted({n.task_index for n in graph.nodes.values() if n.kind == "segment"})
    if len(task_idx) > graph.params.window_tasks:
        keep = set(task_idx[-graph.params.window_tasks:])
        for nid in [n for n, node in graph.nodes.items() if node.kind == "segment" and node.task_index not in keep]:
            graph.remove_node(nid)
    for nid in sorted(wanted):
        graph.insert(wanted[nid])
    return graph


def build_graph(nodes: Iterable[GraphNode], params: GraphParams | None = None, embed=None) -> OverlapGraph:
    g = OverlapGraph(params or GraphParams(), embed=embed)
    for n in sorted(nodes, key=lambda n: n.id):
        g.insert(n)
    return g


@dataclass(frozen=True)
class CandidateGroup:
    members: tuple[str, ...]
    purity_signal: str
    distinct_source_tasks: int
    is_skill_revision_group: bool
    mean_weight: float
    shared: tuple[str, ...] = ()


def maximal_cliques(adj: dict[str, set[str]], max_size: int | None = None) -> list[tuple[str, ...]]:
    """Bron-Kerbosch with pivoting. Branches whose partial clique already
    exceeds ``max_size`` are pruned, since every maximal clique they contain
    is larger still."""
    out: list[tuple[str, ...]] = []

    def expand(r: list[str], p: set[str], x: set[str]) -> None:
        if max_size is not None and len(r) > max_size:
            return
        if not p and not x:
            out.append(tuple(sorted(r)))
            return
        pivot = max(sorted(p | x), key=lambda u: len(p & adj[u]))
        for v in sorted(p - adj[pivot]):
            expand(r + [v], p & adj[v], x & adj[v])
            p = p - {v}
            x = x | {v}

    expand([], set(adj), set())
    return out


def detect_purity(nodes: Sequence[GraphNode], cosine: Callable[[GraphNode, GraphNode], float]):
    """First matching purity signal and what the members share, or ``None``."""
    err_sets = []
    for n in nodes:
        sh: set[str] = set()
        for e in n.error_texts:
            sh.update(shingles(e))
        err_sets.append(sh)
    if all(err_sets):
        common = set.intersection(*err_sets)
        if common:
            return "shared_precondition_failure", tuple(sorted(common))
    common_tools = frozenset.intersection(*(n.tools for n in nodes))
    if common_tools:
        return "shared_tools", tuple(sorted(common_tools))
    first = Counter(nodes[0].arg_names)
    if first and all(Counter(n.arg_names) == first for n in nodes[1:]):
        return "shared_argument_pattern", tuple(sorted(first))
    if all(cosine(a, b) >= ALIGNED_MIN_COSINE for a, b in combinations(nodes, 2)):
        return "aligned_task_structure", ()
    return None


def find_candidate_groups(graph: OverlapGraph, c_min: int = 3, c_max: int = 6,
                          top_k: int | None = 4) -> list[CandidateGroup]:
    """Strict maximal cliques with size in [c_min, c_max], at least two
    source tasks (unless a skill node makes it a revision group), and an
    explainable purity signal; best mean internal weight first."""
    if c_min < 2:
        raise ValueError("c_min must be >= 2")
    adj = {n: set(graph.neighbors(n)) for n in graph.nodes if graph.neighbors(n)}
    groups = []

    def cos(a: GraphNode, b: GraphNode) -> float:
        return kernels.dot(graph.features(a.id).emb, graph.features(b.id).emb)

    for clique in maximal_cliques(adj, c_max):
        if not c_min <= len(clique) <= c_max:
            continue
        members = [graph.nodes[m] for m in clique]
        revision = any(m.kind == "skill" for m in members)
        sources = {m.source for m in members if m.kind == "segment"}
        if not revision and len(sources) < 2:
            continue
        purity = detect_purity(members, cos)
        if purity is None:
            continue
        ws = [graph.weight(a, b) for a, b in combinations(clique, 2)]
        mean = sum(ws) / len(ws)
        groups.append(CandidateGroup(clique, purity[0], len(sources), revision, mean, purity[1]))
    groups.sort(key=lambda g: (-g.mean_weight, g.members))
    return groups if top_k is None else groups[:top_k]
