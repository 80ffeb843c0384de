"""Agent runtime: from spec + incoming messages to a message record.

Covers prompt assembly (with seeded response shuffling against positional
bias), backend dispatch (llm / tool / scripted), answer and peer-rating
extraction, and the rankers used during team reformation.

Scripted agents are deterministic test doubles driven by an explicit
answer table plus optional probabilistic knobs (per-query accuracy,
majority adoption); they let the whole pipeline run offline.
"""

from __future__ import annotations

import logging
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import GatewayError, RatingParseError, RankParseError
from .graph import NO_ANSWER, AgentSpec, MessageRecord, NodeId

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# prompt assembly


@dataclass
class PromptBundle:
    """Everything needed to render one node's request."""

    system_text: str
    instruction_text: str
    peer_messages: List[Tuple[int, str]]  # (display slot, predecessor raw text)
    rating_clause: Optional[str]
    slot_map: Dict[int, NodeId]  # display slot -> predecessor node
    context: dict = field(default_factory=dict)


RATING_CLAUSE_TEMPLATE = (
    "In addition to your answer, rate each numbered peer solution above on a "
    "scale of 1 to 5. Put all {n} scores in one group formatted like "
    "[[1, 5, 2, ...]] at the end of your reply."
)


def assemble_prompt(spec: AgentSpec, query: str,
                    peers: Sequence[MessageRecord], shuffle_seed: int,
                    context: Optional[dict] = None) -> PromptBundle:
    """Build the prompt for one node.

    Peer responses (memory window of 1: only the immediately previous step)
    are presented in a seeded shuffle; the slot map records which display
    position belongs to which predecessor so extracted ratings can be
    un-shuffled later.
    """
    order = list(range(len(peers)))
    random.Random(shuffle_seed).shuffle(order)
    peer_messages = []
    slot_map = {}
    for slot, idx in enumerate(order, start=1):
        peer_messages.append((slot, peers[idx].raw_text))
        slot_map[slot] = peers[idx].node

    rating_clause = None
    if spec.rater and peers:
        rating_clause = RATING_CLAUSE_TEMPLATE.format(n=len(peers))

    system_text = spec.role_prompt
    tool_desc = spec.params.get("tool_description")
    if tool_desc:
        system_text = f"{system_text}\n{tool_desc}"

    return PromptBundle(
        system_text=system_text,
        instruction_text=query,
        peer_messages=peer_messages,
        rating_clause=rating_clause,
        slot_map=slot_map,
        context=dict(context or {}),
    )


def render_user_text(bundle: PromptBundle) -> str:
    parts = [bundle.instruction_text]
    if bundle.peer_messages:
        parts.append("These are the solutions from other agents in the last step:")
        for slot, text in bundle.peer_messages:
            parts.append(f"Solution {slot}:\n{text}")
    if bundle.rating_clause:
        parts.append(bundle.rating_clause)
    return "\n\n".join(parts)


# ---------------------------------------------------------------------------
# extraction


_MC_PATTERN = re.compile(r"\(([A-D])(?![A-Za-z])")
_FENCE_PATTERN = re.compile(r"```(?:[A-Za-z]+\n)?(.*?)```", re.DOTALL)
_ACTION_PATTERN = re.compile(r"^\s*[a-z_]+\[[^\]]*\]\s*$")
_RATING_PATTERN = re.compile(r"\[\[([^\[\]]*)\]\]")


def extract_answer(raw_text: str, task_kind: str) -> str:
    """Pull the task answer out of a raw response.

    multiple-choice: the letter of the last "(X" / "(X)" occurrence;
    open-ended: the content of the last fenced block, else the full text;
    action: the last line matching the ``verb[argument]`` grammar.
    """
    if task_kind == "multiple-choice":
        matches = _MC_PATTERN.findall(raw_text)
        return matches[-1] if matches else NO_ANSWER
    if task_kind == "open-ended":
        blocks = _FENCE_PATTERN.findall(raw_text)
        return blocks[-1].strip() if blocks else raw_text.strip()
    if task_kind == "action":
        for line in reversed(raw_text.splitlines()):
            if _ACTION_PATTERN.match(line):
                return line.strip()
        return NO_ANSWER
    raise ValueError(f"unknown task kind {task_kind!r}")


def extract_ratings(raw_text: str, expected_count: int,
                    slot_map: Dict[int, NodeId]) -> List[Tuple[NodeId, float]]:
    """Parse the last [[...]] score group and un-shuffle it.

    Scores are clamped to [1, 5]. A missing or wrong-length group raises
    :class:`RatingParseError`; the caller substitutes uniform scores.
    """
    if expected_count < 1:
        raise ValueError("expected_count must be >= 1")
    groups = _RATING_PATTERN.findall(raw_text)
    if not groups:
        raise RatingParseError("no [[...]] score group found")
    try:
        scores = [float(x) for x in groups[-1].split(",") if x.strip()]
    except ValueError as exc:
        raise RatingParseError(f"malformed score group: {exc}") from exc
    if len(scores) != expected_count:
        raise RatingParseError(
            f"expected {expected_count} scores, got {len(scores)}"
        )
    out = []
    for slot in range(1, expected_count + 1):
        score = min(5.0, max(1.0, scores[slot - 1]))
        out.append((slot_map[slot], score))
    out.sort(key=lambda pair: pair[0])
    return out


# ---------------------------------------------------------------------------
# scripted behavior


@dataclass
class ScriptedBehavior:
    """Deterministic test double for an LLM agent.

    ``answer_table`` maps (query tag, step, observed peer majority) to an
    answer; "*" acts as a wildcard in any position. When no table entry
    matches, the probabilistic knobs apply: adopt the peer majority with
    ``adopt_majority_prob`` (from step 2 on), else answer the query's gold
    label with ``correct_prob`` and a seeded wrong choice otherwise.
    """

    answer_table: Dict[Tuple[str, object, str], str] = field(default_factory=dict)
    rating_policy: str = "match"  # "match" | "uniform" | "random"
    rating_noise: float = 0.0
    correct_prob: Optional[float] = None
    adopt_majority_prob: float = 0.0
    choices: Tuple[str, ...] = ("A", "B", "C", "D")
    default_answer: str = "A"
    ranking: str = "majority"  # "majority" | "garbage" | "pairwise-only"
    answer_template: str = "The answer is ({answer})."

    @classmethod
    def from_params(cls, params: dict) -> "ScriptedBehavior":
        table = {}
        for entry in params.get("answer_table", []):
            table[(entry["tag"], entry["step"], entry["majority"])] = entry["answer"]
        kwargs = {
            key: params[key] for key in (
                "rating_policy", "rating_noise", "correct_prob",
                "adopt_majority_prob", "default_answer", "ranking",
                "answer_template",
            ) if key in params
        }
        if "choices" in params:
            kwargs["choices"] = tuple(params["choices"])
        return cls(answer_table=table, **kwargs)

    def lookup(self, tag: str, step: int, majority: Optional[str]) -> Optional[str]:
        maj = majority if majority is not None else "*"
        for key in ((tag, step, maj), (tag, step, "*"),
                    (tag, "*", maj), (tag, "*", "*"),
                    ("*", step, maj), ("*", step, "*"),
                    ("*", "*", maj), ("*", "*", "*")):
            if key in self.answer_table:
                return self.answer_table[key]
        return None

    def decide_answer(self, tag: str, step: int, majority: Optional[str],
                      gold: Optional[str], rng: random.Random) -> str:
        from_table = self.lookup(tag, step, majority)
        if from_table is not None:
            return from_table
        if majority is not None and step >= 2 and self.adopt_majority_prob > 0:
            if rng.random() < self.adopt_majority_prob:
                return majority
        if self.correct_prob is not None and gold is not None:
            if rng.random() < self.correct_prob:
                return gold
            wrong = [c for c in self.choices if c != gold]
            if wrong:
                return rng.choice(wrong)
        return self.default_answer

    def rate(self, own_answer: str, peer_answer: str, rng: random.Random) -> int:
        if self.rating_policy == "random":
            return rng.randint(1, 5)
        if self.rating_policy == "uniform":
            return 3
        score = 5 if peer_answer == own_answer else 1
        if self.rating_noise > 0 and rng.random() < self.rating_noise:
            score = rng.randint(1, 5)
        return score


def _peer_majority(bundle: PromptBundle, task_kind: str) -> Optional[str]:
    answers = [
        extract_answer(text, task_kind)
        for _, text in bundle.peer_messages
    ]
    answers = [a for a in answers if a != NO_ANSWER]
    if not answers:
        return None
    counts = Counter(answers)
    best = max(counts.values())
    # deterministic tie-break on the answer text itself
    return sorted(a for a, c in counts.items() if c == best)[0]


def _scripted_response(spec: AgentSpec, bundle: PromptBundle,
                       seed: int) -> str:
    behavior = spec.params.get("behavior")
    if not isinstance(behavior, ScriptedBehavior):
        behavior = ScriptedBehavior.from_params(behavior or {})
    rng = random.Random(seed)
    ctx = bundle.context
    task_kind = ctx.get("task_kind", "multiple-choice")
    majority = _peer_majority(bundle, task_kind)
    answer = behavior.decide_answer(
        tag=ctx.get("tag", "*"), step=ctx.get("step", 1), majority=majority,
        gold=ctx.get("gold"), rng=rng,
    )
    text = behavior.answer_template.format(answer=answer)
    if bundle.rating_clause:
        own = extract_answer(text, task_kind)
        scores = []
        for _, peer_text in bundle.peer_messages:
            peer_answer = extract_answer(peer_text, task_kind)
            scores.append(behavior.rate(own, peer_answer, rng))
        text += "\nScores: [[" + ", ".join(str(s) for s in scores) + "]]"
    return text


# ---------------------------------------------------------------------------
# tool backends


def _fenced_code_blocks(texts: Sequence[str]) -> List[str]:
    blocks = []
    for text in texts:
        blocks.extend(b.strip() for b in _FENCE_PATTERN.findall(text))
    return blocks


def _run_syntax_check(code_blocks: Sequence[str]) -> str:
    verdicts = []
    for i, code in enumerate(code_blocks, start=1):
        try:
            compile(code, "<candidate>", "exec")
            verdicts.append(f"Solution {i}: syntax OK")
        except SyntaxError as exc:
            verdicts.append(f"Solution {i}: syntax error: {exc.msg} (line {exc.lineno})")
    return "\n".join(verdicts)


def _tool_response(spec: AgentSpec, bundle: PromptBundle) -> Tuple[str, Tuple[str, ...]]:
    """Filter peer messages to what the tool can process and run it."""
    kind = spec.params.get("tool") or (spec.tool_bindings[0] if spec.tool_bindings else None)
    blocks = _fenced_code_blocks([text for _, text in bundle.peer_messages])
    if not blocks:
        return "", ("degenerate",)
    if kind == "syntax_check":
        return _run_syntax_check(blocks), ()
    raise GatewayError(f"agent {spec.agent_id}: unknown tool kind {kind!r}")


# ---------------------------------------------------------------------------
# execution


@dataclass(frozen=True)
class Decoding:
    temperature: float = 0.0
    max_tokens: int = 1024


def default_decoding(task_kind: str, temperature: float = 0.0) -> Decoding:
    # longer budget for reasoning chains, shorter for code and actions
    max_tokens = 2048 if task_kind == "multiple-choice" else 1024
    return Decoding(temperature=temperature, max_tokens=max_tokens)


def execute_agent(spec: AgentSpec, bundle: PromptBundle, decoding: Decoding,
                  node: NodeId, task_kind: str,
                  gateway=None, seed: int = 0) -> MessageRecord:
    """Dispatch one node's turn to its backend and build the record."""
    flags: Tuple[str, ...] = ()
    if spec.backend == "scripted":
        raw_text = _scripted_response(spec, bundle, seed)
        call_cost = 1
    elif spec.backend == "tool":
        raw_text, flags = _tool_response(spec, bundle)
        call_cost = int(spec.params.get("tool_call_cost", 0))
    else:
        if gateway is None:
            raise GatewayError(f"agent {spec.agent_id} needs a gateway")
        raw_text = gateway.chat(
            bundle.system_text, render_user_text(bundle),
            temperature=decoding.temperature, max_tokens=decoding.max_tokens,
            agent_id=spec.agent_id, query_id=bundle.context.get("query_id"),
        )
        call_cost = 1

    answer = extract_answer(raw_text, task_kind) if raw_text else NO_ANSWER

    ratings = None
    weights = None
    if spec.rater and bundle.peer_messages:
        try:
            ratings = extract_ratings(raw_text, len(bundle.peer_messages),
                                      bundle.slot_map)
        except RatingParseError:
            ratings = [(n, 3.0) for n in sorted(bundle.slot_map.values())]
            flags = flags + ("rating-parse-failure",)
        total = sum(score for _, score in ratings)
        weights = [(n, score / total) for n, score in ratings]

    return MessageRecord(
        node=node, raw_text=raw_text, answer=answer, ratings=ratings,
        normalized_weights=weights, call_cost=call_cost, flags=flags,
    )


# ---------------------------------------------------------------------------
# ranking


@dataclass
class RankResult:
    survivors: List[int]  # agent ids, best first, length k
    calls: int
    method: str  # "listwise" | "sliding-window" | "identity"


LISTWISE_PROMPT = (
    "You are ranking candidate solutions to the following task.\n\n"
    "Task: {query}\n\n{candidates}\n\n"
    "Rank all {n} solutions from best to worst. Reply with only the "
    "solution numbers in order, for example: 2 > 1 > 3"
)

PAIRWISE_PROMPT = (
    "Which of these two solutions to the task is better?\n\n"
    "Task: {query}\n\nSolution 1:\n{first}\n\nSolution 2:\n{second}\n\n"
    "Reply with only 1 or 2."
)


def _parse_total_order(text: str, n: int) -> List[int]:
    """Read a total order over 1..n from ranker output.

    Numbers are taken in first-mention order (which also resolves ties);
    all n slots must appear.
    """
    seen = []
    for token in re.findall(r"\d+", text):
        value = int(token)
        if 1 <= value <= n and value not in seen:
            seen.append(value)
    if len(seen) != n:
        raise RankParseError(f"output does not order all {n} candidates: {text!r}")
    return seen


def _scripted_rank_text(behavior: ScriptedBehavior,
                        display_answers: List[str]) -> str:
    if behavior.ranking in ("garbage", "pairwise-only"):
        return "I cannot decide on an order."
    counts = Counter(display_answers)
    order = sorted(
        range(1, len(display_answers) + 1),
        key=lambda slot: (-counts[display_answers[slot - 1]], slot),
    )
    return " > ".join(str(s) for s in order)


def _scripted_pairwise(behavior: ScriptedBehavior, display_answers: List[str],
                       first_slot: int, second_slot: int) -> str:
    if behavior.ranking == "garbage":
        return "no idea"
    counts = Counter(display_answers)
    a = counts[display_answers[first_slot - 1]]
    b = counts[display_answers[second_slot - 1]]
    return "1" if a >= b else "2"


def _ranker_behavior(ranker: AgentSpec) -> ScriptedBehavior:
    behavior = ranker.params.get("behavior")
    if not isinstance(behavior, ScriptedBehavior):
        behavior = ScriptedBehavior.from_params(behavior or {})
    return behavior


def rank_listwise(ranker: AgentSpec, query: str,
                  candidates: Sequence[MessageRecord], k: int, seed: int,
                  gateway=None, decoding: Optional[Decoding] = None,
                  query_id: Optional[str] = None) -> RankResult:
    """Rank candidate responses and return the top-k agent ids.

    Candidates are shown in a seeded shuffle. If the listwise output cannot
    be parsed, fall back to a pairwise sliding-window ranker; if that fails
    too, keep the identity order and log a warning.
    """
    if k > len(candidates):
        raise ValueError(f"k={k} exceeds candidate count {len(candidates)}")
    candidates = sorted(candidates, key=lambda r: r.node.agent_id)
    order = list(range(len(candidates)))
    random.Random(seed).shuffle(order)
    display = [candidates[i] for i in order]  # slot s -> display[s-1]
    display_answers = [rec.answer for rec in display]
    n = len(display)
    decoding = decoding or Decoding(temperature=0.0, max_tokens=512)

    def ask(prompt: str) -> str:
        return gateway.chat(
            ranker.role_prompt, prompt,
            temperature=decoding.temperature, max_tokens=decoding.max_tokens,
            agent_id=ranker.agent_id, query_id=query_id,
        )

    scripted = ranker.backend == "scripted"
    behavior = _ranker_behavior(ranker) if scripted else None

    # listwise attempt
    calls = 1
    if scripted:
        reply = _scripted_rank_text(behavior, display_answers)
    else:
        listing = "\n\n".join(
            f"Solution {slot}:\n{rec.raw_text}"
            for slot, rec in enumerate(display, start=1)
        )
        reply = ask(LISTWISE_PROMPT.format(query=query, candidates=listing, n=n))
    try:
        slots = _parse_total_order(reply, n)
        survivors = [display[s - 1].node.agent_id for s in slots[:k]]
        return RankResult(survivors=survivors, calls=calls, method="listwise")
    except RankParseError:
        log.warning("listwise ranking unparseable, trying sliding window")

    # pairwise sliding-window fallback: k passes of adjacent comparisons,
    # bubbling the pair winner toward the front
    slots = list(range(1, n + 1))
    failed = False
    for done in range(k):
        for i in range(n - 1, done, -1):
            calls += 1
            if scripted:
                reply = _scripted_pairwise(behavior, display_answers,
                                           slots[i - 1], slots[i])
            else:
                reply = ask(PAIRWISE_PROMPT.format(
                    query=query,
                    first=display[slots[i - 1] - 1].raw_text,
                    second=display[slots[i] - 1].raw_text,
                ))
            match = re.search(r"[12]", reply)
            if match is None:
                failed = True
                break
            if match.group() == "2":
                slots[i - 1], slots[i] = slots[i], slots[i - 1]
        if failed:
            break
    if not failed:
        survivors = [display[s - 1].node.agent_id for s in slots[:k]]
        return RankResult(survivors=survivors, calls=calls, method="sliding-window")

    log.warning("pairwise ranking also failed; keeping identity order")
    survivors = [rec.node.agent_id for rec in candidates[:k]]
    return RankResult(survivors=survivors, calls=calls, method="identity")
