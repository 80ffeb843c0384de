"""Contribution attribution: peer ratings -> agent importance -> team.

After a trial run, unit mass is placed on the final layer and propagated
backward through the normalized peer-rating weights. Summing a column over
steps gives each agent's importance score; the top-k scores select the
team. A combination-set Shapley value over full pipeline reruns serves as
the supervised oracle, with KL divergence and ListMLE quantifying the
agreement between the two.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .consensus import ConsensusPolicy, consistency_classes
from .errors import AttributionError, MetricError, SelectionError
from .graph import NO_ANSWER, AgentSpec, LayeredGraph, NodeId, predecessors


@dataclass
class ImportanceReport:
    per_node: Dict[NodeId, float]
    per_agent: Dict[int, float]
    layer_sums: Dict[int, float]
    selected_team: List[int] = field(default_factory=list)


@dataclass
class ShapleyReport:
    per_agent: Dict[int, float]
    evaluations: int
    performance_fn_tag: str = "accuracy"


def normalize_ratings(raw: Sequence[Tuple[NodeId, float]]) -> List[Tuple[NodeId, float]]:
    """Turn raw 1-5 scores into weights that sum to 1."""
    if not raw:
        raise AttributionError("cannot normalize an empty rating list")
    total = sum(score for _, score in raw)
    return [(node, score / total) for node, score in raw]


def _syntax_ok(answer: str) -> bool:
    try:
        ast.parse(answer)
        return True
    except SyntaxError:
        return False


def init_final_contributions(graph: LayeredGraph, policy: str = "consistent-answers",
                             consensus: Optional[ConsensusPolicy] = None
                             ) -> Dict[NodeId, float]:
    """Distribute unit mass over the terminal layer.

    "consistent-answers": uniform over the largest consistency class.
    "syntax-ok": uniform over nodes whose answer parses as code.
    An empty qualifying set falls back to uniform over all active terminal
    nodes.
    """
    step = graph.stop_step or graph.max_steps
    records = graph.layer_records(step)
    if not records:
        raise AttributionError(f"terminal layer {step} has no records")

    if policy == "consistent-answers":
        classes = consistency_classes(
            [(r.node.agent_id, r.answer) for r in records],
            consensus or ConsensusPolicy(mode="exact"),
        )
        best = max(len(c) for c in classes)
        if best > 1:
            winner = min(
                (c for c in classes if len(c) == best),
                key=lambda c: min(c),
            )
            qualifying = sorted(winner)
        else:
            qualifying = []
    elif policy == "syntax-ok":
        qualifying = sorted(
            r.node.agent_id for r in records
            if r.answer != NO_ANSWER and _syntax_ok(r.answer)
        )
    else:
        raise ValueError(f"unknown terminal policy {policy!r}")

    if not qualifying:
        qualifying = sorted(r.node.agent_id for r in records)

    mass = 1.0 / len(qualifying)
    contributions = {r.node: 0.0 for r in records}
    for agent_id in qualifying:
        contributions[NodeId(step, agent_id)] = mass
    return contributions


def _weight_row(graph: LayeredGraph, record) -> Dict[NodeId, float]:
    """Backward weights a node assigns to its predecessors.

    Copy-forward nodes pass full mass to their own copy source; non-rater
    (tool) nodes spread uniformly; raters use their normalized ratings.
    """
    preds = predecessors(graph, record.node)
    if not preds:
        return {}
    if record.copied_from is not None:
        return {record.copied_from: 1.0}
    if record.normalized_weights is not None:
        return dict(record.normalized_weights)
    spec = graph.agent(record.node.agent_id)
    if not spec.rater:
        return {p: 1.0 / len(preds) for p in preds}
    raise AttributionError(
        f"rater node {record.node} carries no normalized weights"
    )


def backpropagate_importance(graph: LayeredGraph,
                             terminal: Dict[NodeId, float]) -> ImportanceReport:
    """Propagate terminal mass backward layer by layer.

    Each node's importance is the weighted sum of its successors'
    importances, using the successors' rating weights on this node.
    """
    top = graph.stop_step or graph.max_steps
    per_node: Dict[NodeId, float] = dict(terminal)
    for t in range(top, 1, -1):
        for rec in graph.layer_records(t):
            mass = per_node.get(rec.node, 0.0)
            if mass == 0.0:
                continue
            for pred, weight in _weight_row(graph, rec).items():
                per_node[pred] = per_node.get(pred, 0.0) + mass * weight
        # nodes in layer t-1 that received nothing are still reported
        for rec in graph.layer_records(t - 1):
            per_node.setdefault(rec.node, 0.0)

    layer_sums = {}
    for t in range(1, top + 1):
        layer_sums[t] = sum(
            per_node.get(rec.node, 0.0) for rec in graph.layer_records(t)
        )

    per_agent: Dict[int, float] = {a.agent_id: 0.0 for a in graph.pool}
    for node, value in per_node.items():
        per_agent[node.agent_id] += value

    return ImportanceReport(per_node=per_node, per_agent=per_agent,
                            layer_sums=layer_sums)


def select_team(report: ImportanceReport, k: int) -> List[int]:
    """Top-k agents by importance, ties to the lower agent id."""
    participants = [a for a, v in report.per_agent.items()]
    if k > len(participants):
        raise SelectionError(f"k={k} exceeds {len(participants)} agents")
    ranked = sorted(report.per_agent.items(), key=lambda kv: (-kv[1], kv[0]))
    return [agent_id for agent_id, _ in ranked[:k]]


# ---------------------------------------------------------------------------
# Shapley oracle


def shapley(pool: Sequence[AgentSpec],
            performance_fn: Callable[[Tuple[int, ...]], float],
            classical: bool = False,
            performance_fn_tag: str = "accuracy") -> ShapleyReport:
    """Combination-set Shapley values over full pipeline reruns.

    ``performance_fn`` maps a tuple of agent ids (possibly empty) to a
    score; results are cached so each subset runs once. The default
    normalization divides every marginal difference by |C|*|R| with C the
    combination set of R minus the agent; ``classical`` switches to the
    standard permutation weighting instead.
    """
    ids = sorted(a.agent_id for a in pool)
    if len(ids) > 8:
        raise ValueError(
            "Shapley enumeration is limited to 8 agents; sample subsets instead"
        )

    cache: Dict[Tuple[int, ...], float] = {}

    def perf(subset: Tuple[int, ...]) -> float:
        if subset not in cache:
            cache[subset] = performance_fn(subset)
        return cache[subset]

    n = len(ids)
    per_agent: Dict[int, float] = {}
    evaluations = 0
    for i in ids:
        others = [a for a in ids if a != i]
        total = 0.0
        count = 0
        for size in range(len(others) + 1):
            for subset in combinations(others, size):
                margin = perf(tuple(sorted(subset + (i,)))) - perf(subset)
                if classical:
                    weight = (math.factorial(size)
                              * math.factorial(n - size - 1)
                              / math.factorial(n))
                    total += weight * margin
                else:
                    total += margin
                count += 1
                evaluations += 1
        if classical:
            per_agent[i] = total
        else:
            per_agent[i] = total / (count * n)

    return ShapleyReport(per_agent=per_agent, evaluations=evaluations,
                         performance_fn_tag=performance_fn_tag)


# ---------------------------------------------------------------------------
# agreement metrics


_EPS = 1e-12


def _as_distribution(values: Dict[int, float], ids: Sequence[int],
                     allow_shift: bool = False) -> List[float]:
    vec = [values[i] for i in ids]
    low = min(vec)
    if low < 0:
        if not allow_shift:
            raise MetricError("negative mass in distribution")
        vec = [v - low for v in vec]
    total = sum(vec)
    if total <= 0:
        raise MetricError("zero-mass distribution")
    return [(v + _EPS) / (total + _EPS * len(vec)) for v in vec]


def kl_divergence(p: Sequence[float], q: Sequence[float]) -> float:
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def listmle_loss(scores: Dict[int, float], ranking: Sequence[int]) -> float:
    """Negative log-likelihood of ``ranking`` under a Plackett-Luce model
    with the given raw scores."""
    remaining = [scores[i] for i in ranking]
    loss = 0.0
    for j in range(len(remaining)):
        tail = remaining[j:]
        m = max(tail)
        logz = m + math.log(sum(math.exp(s - m) for s in tail))
        loss += logz - remaining[j]
    return loss


def agreement_metrics(importance: ImportanceReport,
                      shapley_report: ShapleyReport) -> Tuple[float, float]:
    """(KL(shapley || importance), ListMLE of importance under the
    Shapley-ranked permutation)."""
    ids = sorted(importance.per_agent)
    if sorted(shapley_report.per_agent) != ids:
        raise MetricError("importance and Shapley cover different agent sets")
    p = _as_distribution(shapley_report.per_agent, ids, allow_shift=True)
    q = _as_distribution(importance.per_agent, ids)
    kl = kl_divergence(p, q)
    shap_order = sorted(ids, key=lambda i: (-shapley_report.per_agent[i], i))
    lml = listmle_loss(importance.per_agent, shap_order)
    return kl, lml
