"""Forward inference: layer-by-layer message passing on the graph.

Runs one query through the agent pool: layer 1 sees only the query, every
later layer reads the previous layer's responses, reformation steps ask
the ranker to keep the top-k agents (whose messages copy forward at zero
cost), and the quorum check may truncate the run early. The final layer is
post-processed into the output answer.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .consensus import ConsensusPolicy, consistency_classes, should_stop
from .errors import ConfigError, GatewayError, RunError
from .graph import (NO_ANSWER, AgentSpec, LayeredGraph, MessageRecord, NodeId,
                    apply_reformation, build_initial_graph, predecessors,
                    validate_pool)
from .runtime import (Decoding, assemble_prompt, default_decoding,
                      execute_agent, rank_listwise)
from .seeds import derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaskQuery:
    query_id: str
    prompt: str
    task_kind: str = "multiple-choice"
    gold: Optional[str] = None
    tag: str = "*"


@dataclass(frozen=True)
class RunConfig:
    max_steps: int = 4
    reformation_steps: Tuple[int, ...] = ()
    keep_k: int = 2
    consensus: ConsensusPolicy = field(default_factory=ConsensusPolicy)
    role_schedule: Optional[Dict[int, Tuple[str, ...]]] = None
    seed: int = 0
    shuffle_seed: Optional[int] = None  # defaults to seed
    temperature: float = 0.0
    max_tokens: Optional[int] = None  # defaults per task kind
    postprocess: str = "plurality"  # "plurality" | "top-tested-code"
    ranker: Optional[AgentSpec] = None
    parallelism: int = 1

    def __post_init__(self):
        if self.keep_k < 1:
            raise ConfigError("keep_k must be >= 1")
        if any(t >= self.max_steps or t < 2 for t in self.reformation_steps):
            raise ConfigError("reformation steps must lie in [2, max_steps)")
        if self.role_schedule and any(
            t < 1 or t > self.max_steps for t in self.role_schedule
        ):
            raise ConfigError("role schedule steps must lie in [1, max_steps]")

    @property
    def effective_shuffle_seed(self) -> int:
        return self.seed if self.shuffle_seed is None else self.shuffle_seed


@dataclass
class TaskResult:
    query_id: str
    output: str
    stop_step: int
    api_calls: int
    ranker_calls: int
    graph: LayeredGraph


def _copy_forward(graph: LayeredGraph, step: int, agent_id: int) -> MessageRecord:
    source = graph.records[NodeId(step - 1, agent_id)]
    return MessageRecord(
        node=NodeId(step, agent_id),
        raw_text=source.raw_text,
        answer=source.answer,
        call_cost=0,
        copied_from=source.node,
    )


def _acts_this_step(spec: AgentSpec, step: int, config: RunConfig) -> bool:
    if not config.role_schedule or step not in config.role_schedule:
        return True
    return spec.role in config.role_schedule[step]


def run_inference(pool: Sequence[AgentSpec], query: TaskQuery,
                  config: RunConfig, gateway=None) -> TaskResult:
    """Run one query through the pool and return the result + transcript."""
    validate_pool(pool)
    graph = build_initial_graph(pool, config.max_steps, query=query.prompt)
    decoding = Decoding(
        temperature=config.temperature,
        max_tokens=(config.max_tokens
                    or default_decoding(query.task_kind).max_tokens),
    )
    ranker_calls = 0
    stop_step = config.max_steps

    for step in range(1, config.max_steps + 1):
        active = graph.active_agents(step)
        if not active:
            raise RunError(f"no active agents at step {step}", graph=graph)

        if step in config.reformation_steps:
            candidates = [
                graph.records[NodeId(step - 1, a)] for a in active
                if NodeId(step - 1, a) in graph.records
            ]
            k = min(config.keep_k, len(candidates))
            ranker = config.ranker
            if ranker is None:
                raise ConfigError("reformation requires a ranker in the config")
            result = rank_listwise(
                ranker, query.prompt, candidates, k,
                seed=derive_seed(config.effective_shuffle_seed,
                                 query.query_id, step, "rank"),
                gateway=gateway, query_id=query.query_id,
            )
            ranker_calls += result.calls
            survivors = set(result.survivors)
            apply_reformation(graph, step, survivors)
            for agent_id in sorted(survivors):
                graph.add_record(_copy_forward(graph, step, agent_id))
        else:
            _run_layer(graph, step, query, config, decoding, gateway)

        active = graph.active_agents(step)
        if not active:
            raise RunError(f"all agents failed at step {step}", graph=graph)
        answers = [
            (rec.node.agent_id, rec.answer)
            for rec in graph.layer_records(step)
        ]
        classes = consistency_classes(answers, config.consensus)
        if should_stop(classes, len(answers), step, config.consensus):
            stop_step = step
            break

    graph.stop_step = stop_step
    final_records = graph.layer_records(stop_step)
    if config.postprocess == "top-tested-code":
        output = postprocess_top_tested_code(
            graph, final_records,
            seed=derive_seed(config.seed, query.query_id, "post"),
            policy=config.consensus,
        )
    else:
        output = postprocess_plurality(final_records, config.consensus)

    api_calls = sum(r.call_cost for r in graph.records.values()) + ranker_calls
    return TaskResult(
        query_id=query.query_id, output=output, stop_step=stop_step,
        api_calls=api_calls, ranker_calls=ranker_calls, graph=graph,
    )


def _run_layer(graph: LayeredGraph, step: int, query: TaskQuery,
               config: RunConfig, decoding, gateway) -> None:
    """Execute (or copy forward) every active node of one layer."""
    jobs = []
    for agent_id in graph.active_agents(step):
        node = NodeId(step, agent_id)
        spec = graph.agent(agent_id)
        if not _acts_this_step(spec, step, config):
            if step > 1 and NodeId(step - 1, agent_id) in graph.records:
                graph.add_record(_copy_forward(graph, step, agent_id))
            else:
                # masked with nothing to copy: sit this layer out
                graph.active.discard(node)
            continue
        peers = []
        if step > 1:
            peers = [
                graph.records[p] for p in predecessors(graph, node)
                if p in graph.records
            ]
        bundle = assemble_prompt(
            spec, query.prompt, peers,
            shuffle_seed=derive_seed(config.effective_shuffle_seed,
                                     query.query_id, step, agent_id),
            context={
                "query_id": query.query_id,
                "task_kind": query.task_kind,
                "tag": query.tag,
                "gold": query.gold,
                "step": step,
            },
        )
        jobs.append((spec, bundle, node))

    def run_one(job):
        spec, bundle, node = job
        try:
            return execute_agent(
                spec, bundle, decoding, node, query.task_kind,
                gateway=gateway,
                seed=derive_seed(config.seed, query.query_id, node.step,
                                 node.agent_id),
            )
        except GatewayError as exc:
            log.warning("agent %d failed at step %d: %s",
                        spec.agent_id, node.step, exc)
            return exc

    if config.parallelism > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=config.parallelism) as executor:
            outcomes = list(executor.map(run_one, jobs))
    else:
        outcomes = [run_one(job) for job in jobs]

    # merge in (step, agent_id) order so concurrency never shows in transcripts
    for (spec, _, node), outcome in zip(jobs, outcomes):
        if isinstance(outcome, GatewayError):
            graph.deactivate_agent(spec.agent_id, node.step)
        else:
            graph.add_record(outcome)


# ---------------------------------------------------------------------------
# post-processing


def postprocess_plurality(final_records: Sequence[MessageRecord],
                          policy: ConsensusPolicy) -> str:
    """Answer of the largest consistency class; ties go to the class
    containing the lowest agent id."""
    if not final_records:
        raise RunError("no final records to post-process")
    answers = {r.node.agent_id: r.answer for r in final_records}
    classes = consistency_classes(list(answers.items()), policy)
    best = max(len(c) for c in classes)
    winner = min((c for c in classes if len(c) == best), key=lambda c: min(c))
    return answers[min(winner)]


def _harvest_unit_tests(graph: LayeredGraph) -> List[str]:
    """Collect assert-style test lines contributed by tester agents."""
    tests = []
    for _, rec in sorted(graph.records.items()):
        spec = graph.agent(rec.node.agent_id)
        if "unit_test" not in spec.tool_bindings:
            continue
        for line in rec.raw_text.splitlines():
            line = line.strip()
            if line.startswith("assert ") and line not in tests:
                tests.append(line)
    return tests


def _count_passed(candidate: str, tests: Sequence[str]) -> int:
    namespace: dict = {}
    try:
        exec(compile(candidate, "<candidate>", "exec"), namespace)
    except Exception:
        return 0
    passed = 0
    for test in tests:
        try:
            exec(compile(test, "<test>", "exec"), namespace)
            passed += 1
        except Exception:
            pass
    return passed


def postprocess_top_tested_code(graph: LayeredGraph,
                                final_records: Sequence[MessageRecord],
                                seed: int, policy: ConsensusPolicy) -> str:
    """Score every node's code completion by tests passed and pick
    seeded-uniformly among the top five scores. Falls back to plurality
    when no tester contributed tests during the run."""
    import random

    tests = _harvest_unit_tests(graph)
    if not tests:
        log.warning("no stored unit tests; falling back to plurality")
        return postprocess_plurality(final_records, policy)

    candidates = []
    for _, rec in sorted(graph.records.items()):
        if rec.copied_from is not None or rec.answer == NO_ANSWER:
            continue
        spec = graph.agent(rec.node.agent_id)
        if spec.backend == "tool":
            continue
        candidates.append(rec.answer)
    if not candidates:
        return postprocess_plurality(final_records, policy)

    scored = sorted(
        ((_count_passed(code, tests), i) for i, code in enumerate(candidates)),
        key=lambda pair: (-pair[0], pair[1]),
    )
    top = scored[:5]
    _, pick = top[random.Random(seed).randrange(len(top))]
    return candidates[pick]
