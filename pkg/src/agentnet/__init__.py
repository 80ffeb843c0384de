"""Dynamic multi-agent collaboration on a time-layered network.

Agents answer in parallel layers, read and rate each other's previous
responses, and a quorum rule stops the run once enough of a layer agrees.
Backward propagation of the peer ratings yields per-agent importance
scores used to select task-oriented teams.
"""

from .consensus import ConsensusPolicy, bleu, consistency_classes, should_stop
from .engine import RunConfig, TaskQuery, TaskResult, run_inference
from .gateway import CallLedger, ChatGateway, GatewayConfig
from .graph import (NO_ANSWER, AgentSpec, LayeredGraph, MessageRecord, NodeId,
                    apply_reformation, build_initial_graph, predecessors)
from .attribution import (ImportanceReport, ShapleyReport, agreement_metrics,
                          backpropagate_importance, init_final_contributions,
                          normalize_ratings, select_team, shapley)

__all__ = [
    "AgentSpec", "CallLedger", "ChatGateway", "ConsensusPolicy",
    "GatewayConfig", "ImportanceReport", "LayeredGraph", "MessageRecord",
    "NO_ANSWER", "NodeId", "RunConfig", "ShapleyReport", "TaskQuery",
    "TaskResult", "agreement_metrics", "apply_reformation",
    "backpropagate_importance", "bleu", "build_initial_graph",
    "consistency_classes", "init_final_contributions", "normalize_ratings",
    "predecessors", "run_inference", "select_team", "shapley", "should_stop",
]

__version__ = "0.1.0"
