"""Shared builders for scripted pools and common assertions."""

from __future__ import annotations

from typing import Optional, Sequence

import pytest

from agentnet.engine import RunConfig, TaskQuery, TaskResult
from agentnet.graph import AgentSpec


def scripted_agent(agent_id: int, behavior: Optional[dict] = None,
                   **kwargs) -> AgentSpec:
    return AgentSpec(
        agent_id=agent_id,
        display_name=f"agent-{agent_id}",
        role_prompt="You are a careful problem solver.",
        backend="scripted",
        params={"behavior": behavior or {}},
        **kwargs,
    )


def scripted_pool(behaviors: Sequence[dict]) -> list:
    return [scripted_agent(i + 1, b) for i, b in enumerate(behaviors)]


def scripted_ranker(ranking: str = "majority", agent_id: int = 99) -> AgentSpec:
    return AgentSpec(
        agent_id=agent_id,
        display_name="ranker",
        role_prompt="You rank candidate solutions.",
        backend="scripted",
        params={"behavior": {"ranking": ranking}},
    )


def fixed_answer_pool(answers: Sequence[str]) -> list:
    """One agent per answer, always replying with that answer."""
    return scripted_pool([
        {"answer_table": [
            {"tag": "*", "step": "*", "majority": "*", "answer": a}
        ]}
        for a in answers
    ])


def mc_query(query_id: str = "q1", gold: Optional[str] = "A",
             tag: str = "*") -> TaskQuery:
    return TaskQuery(query_id=query_id, prompt="Pick the best option.",
                     task_kind="multiple-choice", gold=gold, tag=tag)


def check_cost_accounting(result: TaskResult, n_agents: int,
                          max_steps: int) -> None:
    """Bookkeeping identities that must hold for every transcript."""
    graph = result.graph
    total_cost = sum(r.call_cost for r in graph.records.values())
    assert result.api_calls == total_cost + result.ranker_calls
    for rec in graph.records.values():
        if rec.copied_from is not None:
            assert rec.call_cost == 0
    assert result.api_calls <= n_agents * max_steps + result.ranker_calls


@pytest.fixture
def basic_config():
    return RunConfig(max_steps=3, seed=7)
