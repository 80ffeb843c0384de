"""Layered collaboration graph: data model and structural bookkeeping.

The collaboration runs on a time-layered feed-forward graph. Layer ``t``
holds one node per agent at step ``t``; edges connect adjacent layers only
and define which previous responses each node reads. The graph doubles as
the audit log of a run: every produced response is stored as a
``MessageRecord`` keyed by its node.

The graph is mutated only through :func:`build_initial_graph`,
:func:`apply_reformation`, and :meth:`LayeredGraph.add_record`; everything
else treats it as read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .errors import ConfigError, GraphError, ReformationError

SCHEMA_VERSION = 1

#: Sentinel used when no answer could be extracted from a response. It
#: participates in consensus as its own equivalence class.
NO_ANSWER = "<no-answer>"


@dataclass(frozen=True)
class AgentSpec:
    """One agent in the candidate pool.

    ``backend`` is one of ``llm``, ``tool``, ``scripted``. Tool agents never
    emit peer ratings. ``params`` carries backend-specific settings (model
    override, scripted behavior, tool kind).
    """

    agent_id: int
    display_name: str
    role_prompt: str
    backend: str = "llm"
    tool_bindings: Tuple[str, ...] = ()
    rater: bool = True
    role: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.backend not in ("llm", "tool", "scripted"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.backend == "tool" and self.rater:
            raise ConfigError(
                f"agent {self.agent_id}: tool agents cannot be raters"
            )


def validate_pool(pool: Sequence[AgentSpec]) -> None:
    """Check that agent ids are unique and dense in [1, N]."""
    if not pool:
        raise ConfigError("agent pool is empty")
    ids = sorted(a.agent_id for a in pool)
    if ids != list(range(1, len(pool) + 1)):
        raise ConfigError(f"agent ids must be dense in [1, N], got {ids}")


@dataclass(frozen=True, order=True)
class NodeId:
    """Address of one node: (time step, agent id)."""

    step: int
    agent_id: int

    def __post_init__(self):
        if self.step < 1:
            raise GraphError(f"step must be >= 1, got {self.step}")


@dataclass
class MessageRecord:
    """One node's response and everything extracted from it."""

    node: NodeId
    raw_text: str
    answer: str
    ratings: Optional[List[Tuple[NodeId, float]]] = None
    normalized_weights: Optional[List[Tuple[NodeId, float]]] = None
    call_cost: int = 1
    copied_from: Optional[NodeId] = None
    flags: Tuple[str, ...] = ()

    def validate(self, predecessors: Sequence[NodeId]) -> None:
        pred_set = set(predecessors)
        for name, pairs in (("ratings", self.ratings),
                            ("normalized_weights", self.normalized_weights)):
            if pairs is None:
                continue
            for node, _ in pairs:
                if node not in pred_set:
                    raise GraphError(
                        f"{name} on {self.node} references non-predecessor {node}"
                    )
        if self.normalized_weights is not None:
            total = sum(w for _, w in self.normalized_weights)
            if abs(total - 1.0) > 1e-9 or any(w < 0 for _, w in self.normalized_weights):
                raise GraphError(
                    f"normalized weights on {self.node} do not form a distribution"
                )


@dataclass
class LayeredGraph:
    """The T-layer collaboration graph plus its per-run records."""

    pool: List[AgentSpec]
    max_steps: int
    query: str = ""
    active: Set[NodeId] = field(default_factory=set)
    # edges[t] holds (src_agent_id, dst_agent_id) pairs for layer t-1 -> t
    edges: Dict[int, Set[Tuple[int, int]]] = field(default_factory=dict)
    records: Dict[NodeId, MessageRecord] = field(default_factory=dict)
    stop_step: Optional[int] = None

    # -- queries ------------------------------------------------------------

    def agent(self, agent_id: int) -> AgentSpec:
        return self.pool[agent_id - 1]

    def is_active(self, node: NodeId) -> bool:
        return node in self.active

    def active_agents(self, step: int) -> List[int]:
        return sorted(
            a.agent_id for a in self.pool
            if NodeId(step, a.agent_id) in self.active
        )

    def layer_records(self, step: int) -> List[MessageRecord]:
        out = []
        for agent_id in self.active_agents(step):
            rec = self.records.get(NodeId(step, agent_id))
            if rec is not None:
                out.append(rec)
        return out

    def add_record(self, record: MessageRecord) -> None:
        node = record.node
        if not self.is_active(node):
            raise GraphError(f"cannot record on inactive node {node}")
        if node in self.records:
            raise GraphError(f"node {node} already has a record")
        record.validate(predecessors(self, node))
        self.records[node] = record

    def deactivate_agent(self, agent_id: int, from_step: int) -> None:
        """Drop an agent from ``from_step`` onward (failure handling)."""
        for t in range(from_step, self.max_steps + 1):
            self.active.discard(NodeId(t, agent_id))
            if t in self.edges:
                self.edges[t] = {e for e in self.edges[t] if e[1] != agent_id}
            if t + 1 in self.edges:
                self.edges[t + 1] = {e for e in self.edges[t + 1] if e[0] != agent_id}

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "query": self.query,
            "max_steps": self.max_steps,
            "stop_step": self.stop_step,
            "pool": [asdict(a) for a in self.pool],
            "active": sorted([n.step, n.agent_id] for n in self.active),
            "edges": {
                str(t): sorted(list(e) for e in pairs)
                for t, pairs in self.edges.items()
            },
            "records": [_record_to_dict(r) for _, r in sorted(self.records.items())],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LayeredGraph":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise GraphError(
                f"unsupported transcript schema {doc.get('schema_version')!r}"
            )
        pool = []
        for spec in doc["pool"]:
            spec = dict(spec)
            spec["tool_bindings"] = tuple(spec.get("tool_bindings", ()))
            pool.append(AgentSpec(**spec))
        graph = cls(pool=pool, max_steps=doc["max_steps"], query=doc["query"])
        graph.stop_step = doc["stop_step"]
        graph.active = {NodeId(s, a) for s, a in doc["active"]}
        graph.edges = {
            int(t): {tuple(e) for e in pairs}
            for t, pairs in doc["edges"].items()
        }
        for rec in doc["records"]:
            record = _record_from_dict(rec)
            graph.records[record.node] = record
        return graph


def _record_to_dict(rec: MessageRecord) -> dict:
    def pairs(items):
        return None if items is None else [[n.step, n.agent_id, v] for n, v in items]

    return {
        "node": [rec.node.step, rec.node.agent_id],
        "raw_text": rec.raw_text,
        "answer": rec.answer,
        "ratings": pairs(rec.ratings),
        "normalized_weights": pairs(rec.normalized_weights),
        "call_cost": rec.call_cost,
        "copied_from": (
            None if rec.copied_from is None
            else [rec.copied_from.step, rec.copied_from.agent_id]
        ),
        "flags": list(rec.flags),
    }


def _record_from_dict(doc: dict) -> MessageRecord:
    def pairs(items):
        return None if items is None else [(NodeId(s, a), v) for s, a, v in items]

    return MessageRecord(
        node=NodeId(*doc["node"]),
        raw_text=doc["raw_text"],
        answer=doc["answer"],
        ratings=pairs(doc["ratings"]),
        normalized_weights=pairs(doc["normalized_weights"]),
        call_cost=doc["call_cost"],
        copied_from=None if doc["copied_from"] is None else NodeId(*doc["copied_from"]),
        flags=tuple(doc["flags"]),
    )


# -- construction and rewiring ---------------------------------------------


def build_initial_graph(pool: Sequence[AgentSpec], max_steps: int,
                        query: str = "") -> LayeredGraph:
    """Build the fully connected layered graph: N nodes per layer for
    ``max_steps`` layers, each adjacent layer pair completely bipartite."""
    validate_pool(pool)
    if max_steps < 1:
        raise ConfigError(f"max_steps must be >= 1, got {max_steps}")
    graph = LayeredGraph(pool=list(pool), max_steps=max_steps, query=query)
    ids = [a.agent_id for a in pool]
    for t in range(1, max_steps + 1):
        for i in ids:
            graph.active.add(NodeId(t, i))
    for t in range(2, max_steps + 1):
        graph.edges[t] = {(i, j) for i in ids for j in ids}
    return graph


def apply_reformation(graph: LayeredGraph, step: int,
                      survivors: Set[int]) -> LayeredGraph:
    """Rewire the graph after team reformation at ``step``.

    Non-survivor agents are deactivated from ``step`` onward and every edge
    set at or after ``step`` becomes the complete bipartite product over
    survivor nodes. Survivor nodes at ``step`` are expected to carry
    copy-forward records (the caller creates them).
    """
    if not survivors:
        raise ReformationError("survivor set is empty")
    current = set(graph.active_agents(step))
    if not set(survivors) <= current:
        raise ReformationError(
            f"survivors {sorted(survivors)} not a subset of active agents "
            f"{sorted(current)} at step {step}"
        )
    dropped = current - set(survivors)
    for agent_id in dropped:
        for t in range(step, graph.max_steps + 1):
            graph.active.discard(NodeId(t, agent_id))
    # incoming edges of the reformation layer keep all previous-layer sources
    if step in graph.edges:
        graph.edges[step] = {
            (i, j) for (i, j) in graph.edges[step] if j in survivors
        }
    for t in range(step + 1, graph.max_steps + 1):
        graph.edges[t] = {(i, j) for i in survivors for j in survivors}
    return graph


def predecessors(graph: LayeredGraph, node: NodeId) -> List[NodeId]:
    """Sources of the node's incoming edges, in agent-id order."""
    if node not in graph.active and node not in graph.records:
        raise GraphError(f"unknown or inactive node {node}")
    if node.step == 1:
        return []
    pairs = graph.edges.get(node.step, set())
    return [
        NodeId(node.step - 1, i)
        for i, j in sorted(pairs) if j == node.agent_id
    ]
