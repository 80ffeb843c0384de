"""Prompt assembly, answer/rating extraction, scripted doubles, rankers."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentnet.errors import RatingParseError, RankParseError
from agentnet.graph import NO_ANSWER, AgentSpec, MessageRecord, NodeId
from agentnet.runtime import (Decoding, PromptBundle, ScriptedBehavior,
                              assemble_prompt, default_decoding,
                              execute_agent, extract_answer, extract_ratings,
                              rank_listwise, render_user_text,
                              _parse_total_order)

from conftest import scripted_agent, scripted_ranker


def peer(step, agent, text):
    return MessageRecord(node=NodeId(step, agent), raw_text=text,
                         answer=extract_answer(text, "multiple-choice"))


# ---------------------------------------------------------------------------
# prompt assembly


def test_prompt_shuffle_is_seeded_and_reversible():
    spec = scripted_agent(1)
    peers = [peer(1, i, f"The answer is (A). #{i}") for i in (1, 2, 3, 4)]
    one = assemble_prompt(spec, "q", peers, shuffle_seed=11)
    two = assemble_prompt(spec, "q", peers, shuffle_seed=11)
    other = assemble_prompt(spec, "q", peers, shuffle_seed=12)
    assert one.peer_messages == two.peer_messages
    assert one.slot_map == two.slot_map
    assert one.peer_messages != other.peer_messages  # 4! orders, seeded apart
    # slot map inverts the shuffle
    for slot, text in one.peer_messages:
        assert peers[one.slot_map[slot].agent_id - 1].raw_text == text


def test_rating_clause_only_for_raters_with_peers():
    rater = scripted_agent(1)
    non_rater = scripted_agent(2, rater=False)
    peers = [peer(1, 1, "The answer is (B).")]
    assert assemble_prompt(rater, "q", peers, 0).rating_clause is not None
    assert assemble_prompt(rater, "q", [], 0).rating_clause is None
    assert assemble_prompt(non_rater, "q", peers, 0).rating_clause is None


def test_render_user_text_lists_solutions_in_slot_order():
    spec = scripted_agent(1)
    peers = [peer(1, 1, "first"), peer(1, 2, "second")]
    bundle = assemble_prompt(spec, "the query", peers, shuffle_seed=3)
    text = render_user_text(bundle)
    assert text.startswith("the query")
    assert "Solution 1:" in text and "Solution 2:" in text
    assert text.index("Solution 1:") < text.index("Solution 2:")


# ---------------------------------------------------------------------------
# answer extraction


@pytest.mark.parametrize("raw,expected", [
    ("I think the answer is (B).", "B"),
    ("Maybe (A)... no, final: (C)", "C"),
    ("(AB) is not a letter answer", NO_ANSWER),
    ("no parenthesised letter", NO_ANSWER),
    ("(D", "D"),
])
def test_extract_multiple_choice(raw, expected):
    assert extract_answer(raw, "multiple-choice") == expected


def test_extract_open_ended_prefers_last_fenced_block():
    raw = "First try:\n```python\nx = 1\n```\nBetter:\n```\ny = 2\n```"
    assert extract_answer(raw, "open-ended") == "y = 2"
    assert extract_answer("plain text answer", "open-ended") == "plain text answer"


def test_extract_action_grammar():
    raw = "thinking...\nsearch[blue dress]\nmore words"
    assert extract_answer(raw, "action") == "search[blue dress]"
    assert extract_answer("no action here", "action") == NO_ANSWER


def test_extract_unknown_kind_raises():
    with pytest.raises(ValueError):
        extract_answer("x", "essay")


# ---------------------------------------------------------------------------
# rating extraction


def slot_map(n):
    return {s: NodeId(1, n + 1 - s) for s in range(1, n + 1)}  # reversed


def test_ratings_unshuffled_through_slot_map():
    ratings = extract_ratings("blah [[5, 1, 3]]", 3, slot_map(3))
    # slot 1 -> agent 3, slot 2 -> agent 2, slot 3 -> agent 1
    assert ratings == [(NodeId(1, 1), 3.0), (NodeId(1, 2), 1.0),
                       (NodeId(1, 3), 5.0)]


def test_ratings_use_last_group_and_clamp():
    ratings = extract_ratings("[[1, 1]] then [[9, -2]]", 2, slot_map(2))
    assert [score for _, score in ratings] == [1.0, 5.0]


@pytest.mark.parametrize("raw", ["no scores", "[[1, 2]]", "[[a, b, c]]"])
def test_rating_parse_failures(raw):
    with pytest.raises(RatingParseError):
        extract_ratings(raw, 3, slot_map(3))


# ---------------------------------------------------------------------------
# scripted behavior


def test_answer_table_wildcards_most_specific_first():
    behavior = ScriptedBehavior(answer_table={
        ("math", 1, "*"): "B",
        ("math", "*", "*"): "C",
        ("*", "*", "*"): "D",
    })
    rng = random.Random(0)
    assert behavior.decide_answer("math", 1, None, None, rng) == "B"
    assert behavior.decide_answer("math", 2, None, None, rng) == "C"
    assert behavior.decide_answer("law", 9, None, None, rng) == "D"


def test_correct_prob_extremes():
    rng = random.Random(0)
    always = ScriptedBehavior(correct_prob=1.0)
    never = ScriptedBehavior(correct_prob=0.0)
    for _ in range(20):
        assert always.decide_answer("*", 1, None, "C", rng) == "C"
        assert never.decide_answer("*", 1, None, "C", rng) != "C"


def test_adopt_majority_only_from_step_two():
    behavior = ScriptedBehavior(adopt_majority_prob=1.0, default_answer="D")
    rng = random.Random(0)
    assert behavior.decide_answer("*", 1, "A", None, rng) == "D"
    assert behavior.decide_answer("*", 2, "A", None, rng) == "A"


def test_match_rating_policy():
    behavior = ScriptedBehavior(rating_policy="match")
    rng = random.Random(0)
    assert behavior.rate("A", "A", rng) == 5
    assert behavior.rate("A", "B", rng) == 1


def test_execute_scripted_agent_produces_normalized_weights():
    spec = scripted_agent(1, {"answer_table": [
        {"tag": "*", "step": "*", "majority": "*", "answer": "A"}
    ]})
    peers = [peer(1, 2, "The answer is (A)."),
             peer(1, 3, "The answer is (B).")]
    bundle = assemble_prompt(spec, "q", peers, shuffle_seed=0,
                             context={"task_kind": "multiple-choice", "step": 2})
    record = execute_agent(spec, bundle, Decoding(), NodeId(2, 1),
                           "multiple-choice", seed=5)
    assert record.answer == "A"
    assert record.call_cost == 1
    weights = dict(record.normalized_weights)
    # match policy: 5 for the agreeing peer, 1 for the other
    assert weights[NodeId(1, 2)] == pytest.approx(5 / 6)
    assert weights[NodeId(1, 3)] == pytest.approx(1 / 6)


def test_rating_parse_failure_falls_back_to_uniform():
    spec = scripted_agent(1, {"answer_template": "The answer is ({answer})",
                              "rating_policy": "match"})
    # sabotage: template omits the score group by patching rate to crash the
    # clause -- simpler: use a non-rater peer bundle with a hand-built bundle
    bundle = PromptBundle(
        system_text="", instruction_text="q",
        peer_messages=[(1, "The answer is (B).")],
        rating_clause=None,  # scripted double emits no [[...]] group
        slot_map={1: NodeId(1, 2)},
        context={"task_kind": "multiple-choice", "step": 2},
    )
    record = execute_agent(spec, bundle, Decoding(), NodeId(2, 1),
                           "multiple-choice", seed=0)
    assert "rating-parse-failure" in record.flags
    assert dict(record.normalized_weights) == {NodeId(1, 2): 1.0}


def test_tool_agent_checks_syntax_of_fenced_blocks():
    spec = AgentSpec(agent_id=2, display_name="checker", role_prompt="",
                     backend="tool", rater=False, tool_bindings=("syntax_check",))
    peers = [peer(1, 1, "```python\ndef f():\n    return 1\n```"),
             peer(1, 3, "```python\ndef g(:\n```")]
    bundle = assemble_prompt(spec, "q", peers, shuffle_seed=0)
    record = execute_agent(spec, bundle, Decoding(), NodeId(2, 2), "open-ended")
    assert "syntax OK" in record.raw_text
    assert "syntax error" in record.raw_text
    assert record.call_cost == 0
    assert record.normalized_weights is None


def test_tool_agent_with_no_code_is_degenerate():
    spec = AgentSpec(agent_id=1, display_name="checker", role_prompt="",
                     backend="tool", rater=False, tool_bindings=("syntax_check",))
    bundle = assemble_prompt(spec, "q", [peer(1, 2, "prose only")], 0)
    record = execute_agent(spec, bundle, Decoding(), NodeId(2, 1), "open-ended")
    assert record.flags == ("degenerate",)
    assert record.answer == NO_ANSWER


def test_default_decoding_budgets():
    assert default_decoding("multiple-choice").max_tokens == 2048
    assert default_decoding("open-ended").max_tokens == 1024


# ---------------------------------------------------------------------------
# ranking


def test_parse_total_order_first_mention_wins():
    assert _parse_total_order("2 > 1 > 3", 3) == [2, 1, 3]
    assert _parse_total_order("I rank 3, then 3 again, then 1 and 2", 3) == [3, 1, 2]
    with pytest.raises(RankParseError):
        _parse_total_order("2 and 1 only", 3)
    with pytest.raises(RankParseError):
        _parse_total_order("", 2)


def candidates(answers):
    return [peer(1, i + 1, f"The answer is ({a}).")
            for i, a in enumerate(answers)]


def test_listwise_ranker_keeps_majority_answers():
    result = rank_listwise(scripted_ranker(), "q",
                           candidates(["A", "B", "A", "C"]), k=2, seed=0)
    assert result.method == "listwise"
    assert sorted(result.survivors) == [1, 3]


def test_pairwise_fallback_on_unparseable_listwise():
    result = rank_listwise(scripted_ranker("pairwise-only"), "q",
                           candidates(["B", "A", "A"]), k=2, seed=1)
    assert result.method == "sliding-window"
    assert result.calls > 1
    assert sorted(result.survivors) == [2, 3]


def test_identity_fallback_when_everything_fails(caplog):
    result = rank_listwise(scripted_ranker("garbage"), "q",
                           candidates(["A", "B"]), k=1, seed=0)
    assert result.method == "identity"
    assert result.survivors == [1]


def test_rank_k_bounds():
    with pytest.raises(ValueError):
        rank_listwise(scripted_ranker(), "q", candidates(["A"]), k=2, seed=0)


@given(seed=st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_majority_ranker_shuffle_invariant_for_strict_majority(seed):
    # a strict majority answer must survive regardless of presentation order
    result = rank_listwise(scripted_ranker(), "q",
                           candidates(["A", "A", "A", "B"]), k=2, seed=seed)
    assert set(result.survivors) <= {1, 2, 3}
