"""Layer-consistency checks for early stopping, and the BLEU scorer.

Closed-form tasks compare answers by exact string equality; open-ended
tasks (code, free text) compare by sentence BLEU against a threshold
(default 0.9). The quorum rule terminates a run once the largest
consistency class reaches ceil(2n/3) of the layer's active agents.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Sequence, Set, Tuple

_MAX_NGRAM = 4


def _tokenize_13a(line: str) -> List[str]:
    """Minimal mteval-v13a compatible tokenization for Western languages."""
    norm = line
    norm = norm.replace("<skipped>", "")
    norm = norm.replace("-\n", "")
    norm = norm.replace("\n", " ")
    norm = norm.replace("&quot;", '"')
    norm = norm.replace("&amp;", "&")
    norm = norm.replace("&lt;", "<")
    norm = norm.replace("&gt;", ">")

    norm = f" {norm} "
    norm = re.sub(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])", r" \1 ", norm)
    norm = re.sub(r"([^0-9])([\.,])", r"\1 \2 ", norm)
    norm = re.sub(r"([\.,])([^0-9])", r" \1 \2", norm)
    norm = re.sub(r"([0-9])(-)", r"\1 \2 ", norm)
    return norm.split()


def _ngram_counts(tokens: Sequence[str], order: int) -> Counter:
    counts: Counter = Counter()
    for i in range(len(tokens) - order + 1):
        counts[tuple(tokens[i:i + order])] += 1
    return counts


def bleu(candidate: str, reference: str) -> float:
    """Sentence BLEU in [0, 1]: 13a tokenization, 4-gram precisions,
    exponential smoothing, effective order off, mixed case, one reference.

    Identical strings (including both empty) score 1.0 by convention, so
    that consistency of byte-equal outputs never depends on length.
    """
    if candidate == reference:
        return 1.0

    cand = _tokenize_13a(candidate)
    ref = _tokenize_13a(reference)
    sys_len, ref_len = len(cand), len(ref)
    if sys_len == 0:
        return 0.0

    precisions = [0.0] * _MAX_NGRAM
    smooth = 1.0
    for n in range(1, _MAX_NGRAM + 1):
        cand_ngrams = _ngram_counts(cand, n)
        total = sum(cand_ngrams.values())
        if total == 0:
            break
        ref_ngrams = _ngram_counts(ref, n)
        correct = sum(
            min(count, ref_ngrams.get(gram, 0))
            for gram, count in cand_ngrams.items()
        )
        if correct == 0:
            smooth *= 2.0
            precisions[n - 1] = 1.0 / (smooth * total)
        else:
            precisions[n - 1] = correct / total

    if any(p == 0.0 for p in precisions):
        return 0.0

    brevity = 1.0 if sys_len >= ref_len else math.exp(1 - ref_len / sys_len)
    return brevity * math.exp(sum(math.log(p) for p in precisions) / _MAX_NGRAM)


@dataclass(frozen=True)
class ConsensusPolicy:
    """How layer answers are grouped and when the run may stop."""

    mode: str = "exact"  # "exact" | "bleu"
    bleu_threshold: float = 0.9
    earliest_stop_step: int = 1
    enabled: bool = True

    def __post_init__(self):
        if self.mode not in ("exact", "bleu"):
            raise ValueError(f"unknown consensus mode {self.mode!r}")
        if not (0.0 < self.bleu_threshold <= 1.0):
            raise ValueError("bleu_threshold must be in (0, 1]")
        if self.earliest_stop_step < 1:
            raise ValueError("earliest_stop_step must be >= 1")


def consistency_classes(answers: Sequence[Tuple[int, str]],
                        policy: ConsensusPolicy) -> List[Set[int]]:
    """Partition (agent_id, answer) pairs into consistency classes.

    Exact mode groups equal strings; the no-answer marker always forms
    singletons. BLEU mode clusters greedily in agent-id order: an answer
    joins the first class whose representative scores >= threshold in
    either direction, otherwise founds a new class.
    """
    from .graph import NO_ANSWER

    ordered = sorted(answers)
    if policy.mode == "exact":
        groups: Dict[str, Set[int]] = {}
        classes: List[Set[int]] = []
        for agent_id, answer in ordered:
            if answer == NO_ANSWER:
                classes.append({agent_id})
            else:
                groups.setdefault(answer, set()).add(agent_id)
        return list(groups.values()) + classes

    classes = []
    reps: List[str] = []
    for agent_id, answer in ordered:
        placed = False
        for members, rep in zip(classes, reps):
            if max(bleu(answer, rep), bleu(rep, answer)) >= policy.bleu_threshold:
                members.add(agent_id)
                placed = True
                break
        if not placed:
            classes.append({agent_id})
            reps.append(answer)
    return classes


def quorum_threshold(active_count: int) -> int:
    """Smallest class size that counts as consensus: ceil(2n/3)."""
    return -(-2 * active_count // 3)


def should_stop(classes: Sequence[Set[int]], active_count: int, step: int,
                policy: ConsensusPolicy) -> bool:
    """True iff the step gate passed and a class reached the quorum."""
    if not policy.enabled or step < policy.earliest_stop_step:
        return False
    if not classes:
        return False
    assert active_count == sum(len(c) for c in classes)
    return max(len(c) for c in classes) >= quorum_threshold(active_count)
