"""Two-stage pipeline: team optimization, task solving, and reporting.

Stage 1 runs a trial per sampled query, turns peer ratings into
importance scores, averages them over the subset, and keeps the top-k
agents (per group when queries are tagged). Stage 2 runs the selected
team over the full dataset and reports accuracy and call counts. Gold
labels are only ever used for grading reports, never for selection.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .attribution import (ImportanceReport, ShapleyReport, agreement_metrics,
                          backpropagate_importance, init_final_contributions,
                          select_team, shapley)
from .consensus import ConsensusPolicy
from .engine import RunConfig, TaskQuery, TaskResult, run_inference
from .errors import AgentNetError, ConfigError
from .graph import SCHEMA_VERSION, AgentSpec, validate_pool
from .seeds import derive_seed

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# datasets and grading


@dataclass
class Dataset:
    path: Optional[str]
    entries: List[TaskQuery]

    def sample(self, fraction: float, seed: int) -> "Dataset":
        if not (0 < fraction <= 1):
            raise ConfigError("sample fraction must be in (0, 1]")
        if fraction == 1.0:
            return self
        count = max(1, round(len(self.entries) * fraction))
        picked = random.Random(seed).sample(self.entries, count)
        picked.sort(key=lambda q: q.query_id)
        return Dataset(path=self.path, entries=picked)

    def groups(self, enabled: bool) -> Dict[str, List[TaskQuery]]:
        if not enabled:
            return {"*": list(self.entries)}
        grouped: Dict[str, List[TaskQuery]] = {}
        for query in self.entries:
            grouped.setdefault(query.tag, []).append(query)
        return grouped


def load_dataset(path: str) -> Dataset:
    entries = []
    seen = set()
    with open(path) as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            query = TaskQuery(
                query_id=str(doc["query_id"]),
                prompt=doc["prompt"],
                task_kind=doc.get("task_kind", "multiple-choice"),
                gold=doc.get("gold"),
                tag=doc.get("tag", "*"),
            )
            if query.query_id in seen:
                raise ConfigError(f"duplicate query_id {query.query_id}")
            seen.add(query.query_id)
            entries.append(query)
    if not entries:
        raise ConfigError(f"dataset {path} is empty")
    return Dataset(path=path, entries=entries)


def _normalize_text(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip()).lower()


def grade(query: TaskQuery, output: str,
          checker: Optional[Callable[[TaskQuery, str], bool]] = None
          ) -> Optional[bool]:
    """True/False when the query has a gold label, None otherwise."""
    if checker is not None:
        return checker(query, output)
    if query.gold is None:
        return None
    if query.task_kind == "multiple-choice":
        return output == query.gold
    return _normalize_text(output) == _normalize_text(query.gold)


# ---------------------------------------------------------------------------
# pool and config files


def _spec_from_dict(doc: dict) -> AgentSpec:
    return AgentSpec(
        agent_id=doc["agent_id"],
        display_name=doc.get("display_name", f"agent-{doc['agent_id']}"),
        role_prompt=doc.get("role_prompt", ""),
        backend=doc.get("backend", "llm"),
        tool_bindings=tuple(doc.get("tool_bindings", ())),
        rater=doc.get("rater", doc.get("backend", "llm") != "tool"),
        role=doc.get("role", ""),
        params=doc.get("params", {}),
    )


def load_pool(path: str) -> Tuple[List[AgentSpec], Optional[AgentSpec]]:
    doc = json.loads(Path(path).read_text())
    pool = [_spec_from_dict(a) for a in doc["agents"]]
    validate_pool(pool)
    ranker = None
    if "ranker" in doc:
        ranker_doc = dict(doc["ranker"])
        ranker_doc.setdefault("agent_id", len(pool) + 1)
        ranker = _spec_from_dict(ranker_doc)
    return pool, ranker


def load_config(path: Optional[str] = None, **overrides) -> RunConfig:
    doc = {}
    if path:
        doc = json.loads(Path(path).read_text())
    consensus = ConsensusPolicy(**doc.pop("consensus", {}))
    doc.update(overrides)
    doc.setdefault("consensus", consensus)
    if "reformation_steps" in doc:
        doc["reformation_steps"] = tuple(doc["reformation_steps"])
    if "role_schedule" in doc and isinstance(doc["role_schedule"], dict):
        doc["role_schedule"] = {
            int(step): tuple(roles) for step, roles in doc["role_schedule"].items()
        }
    return RunConfig(**doc)


def subset_pool(pool: Sequence[AgentSpec],
                ids: Sequence[int]) -> Tuple[List[AgentSpec], Dict[int, int]]:
    """Reindex a subset of agents to dense ids; returns (pool, new->old)."""
    by_id = {a.agent_id: a for a in pool}
    mapping = {}
    subset = []
    for new_id, old_id in enumerate(sorted(ids), start=1):
        subset.append(replace(by_id[old_id], agent_id=new_id))
        mapping[new_id] = old_id
    return subset, mapping


# ---------------------------------------------------------------------------
# stage 2: task solving


@dataclass
class RunReport:
    stage: str
    rows: List[dict] = field(default_factory=list)
    selected_team: Optional[List[int]] = None

    @property
    def accuracy(self) -> Optional[float]:
        graded = [r["correct"] for r in self.rows if r.get("correct") is not None]
        if not graded:
            return None
        return sum(graded) / len(graded)

    @property
    def mean_api_calls(self) -> float:
        counted = [r["api_calls"] for r in self.rows if r.get("api_calls") is not None]
        return sum(counted) / len(counted) if counted else 0.0

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "stage": self.stage,
            "selected_team": self.selected_team,
            "accuracy": self.accuracy,
            "mean_api_calls": self.mean_api_calls,
            "rows": self.rows,
        }


def _result_doc(result: TaskResult, correct: Optional[bool]) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "query_id": result.query_id,
        "output": result.output,
        "correct": correct,
        "api_calls": result.api_calls,
        "ranker_calls": result.ranker_calls,
        "stop_step": result.stop_step,
        "graph": result.graph.to_dict(),
    }


def solve(pool: Sequence[AgentSpec], dataset: Dataset, config: RunConfig,
          gateway=None, out_dir: Optional[str] = None,
          checker: Optional[Callable[[TaskQuery, str], bool]] = None
          ) -> RunReport:
    """Run Stage 2 over every query. Existing transcripts in ``out_dir``
    are reused, so interrupted runs resume where they left off."""
    report = RunReport(stage="solve")
    transcripts = None
    if out_dir:
        transcripts = Path(out_dir) / "transcripts"
        transcripts.mkdir(parents=True, exist_ok=True)

    for query in dataset.entries:
        if transcripts is not None:
            path = transcripts / f"{query.query_id}.json"
            if path.exists():
                doc = json.loads(path.read_text())
                report.rows.append({
                    k: doc[k] for k in
                    ("query_id", "output", "correct", "api_calls", "stop_step")
                })
                continue
        try:
            result = run_inference(pool, query, config, gateway=gateway)
        except AgentNetError as exc:
            log.error("query %s failed: %s", query.query_id, exc)
            report.rows.append({
                "query_id": query.query_id, "output": None, "correct": None,
                "api_calls": None, "stop_step": None, "error": str(exc),
            })
            continue
        correct = grade(query, result.output, checker=checker)
        doc = _result_doc(result, correct)
        if transcripts is not None:
            tmp = transcripts / f".{query.query_id}.json.tmp"
            tmp.write_text(json.dumps(doc, indent=2))
            tmp.replace(transcripts / f"{query.query_id}.json")
        report.rows.append({
            "query_id": query.query_id, "output": result.output,
            "correct": correct, "api_calls": result.api_calls,
            "stop_step": result.stop_step,
        })
    return report


# ---------------------------------------------------------------------------
# stage 1: team optimization


@dataclass
class OptimizeResult:
    group: str
    team: List[int]
    mean_importance: Dict[int, float]
    n_queries: int

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "group": self.group,
            "team": self.team,
            "mean_importance": {str(k): v for k, v in self.mean_importance.items()},
            "n_queries": self.n_queries,
        }


def _terminal_policy(task_kind: str) -> str:
    return "syntax-ok" if task_kind == "open-ended" else "consistent-answers"


def importance_for_query(pool: Sequence[AgentSpec], query: TaskQuery,
                         config: RunConfig, gateway=None
                         ) -> Tuple[TaskResult, ImportanceReport]:
    result = run_inference(pool, query, config, gateway=gateway)
    terminal = init_final_contributions(
        result.graph, policy=_terminal_policy(query.task_kind),
        consensus=config.consensus,
    )
    return result, backpropagate_importance(result.graph, terminal)


def optimize(pool: Sequence[AgentSpec], dataset: Dataset, config: RunConfig,
             k: int, group_by: bool = False,
             sample_fraction: Optional[float] = None,
             gateway=None) -> Dict[str, OptimizeResult]:
    """Stage 1: trial runs + importance averaging + top-k selection.

    Selection is unsupervised: gold labels are never read here.
    """
    if sample_fraction:
        dataset = dataset.sample(sample_fraction,
                                 seed=derive_seed(config.seed, "sample"))
    results = {}
    for group, queries in sorted(dataset.groups(group_by).items()):
        if not queries:
            log.warning("group %s has no queries; skipped", group)
            continue
        sums: Dict[int, float] = {a.agent_id: 0.0 for a in pool}
        for query in queries:
            _, report = importance_for_query(pool, query, config, gateway=gateway)
            for agent_id, value in report.per_agent.items():
                sums[agent_id] += value
        mean = {a: v / len(queries) for a, v in sums.items()}
        aggregated = ImportanceReport(per_node={}, per_agent=mean, layer_sums={})
        team = select_team(aggregated, k)
        results[group] = OptimizeResult(
            group=group, team=team, mean_importance=mean,
            n_queries=len(queries),
        )
    return results


# ---------------------------------------------------------------------------
# attribution evaluation


def make_performance_fn(pool: Sequence[AgentSpec], dataset: Dataset,
                        config: RunConfig, gateway=None
                        ) -> Callable[[Tuple[int, ...]], float]:
    """Accuracy of the full pipeline run with a subset of the pool.

    The empty team scores 0 by convention.
    """

    def performance(ids: Tuple[int, ...]) -> float:
        if not ids:
            return 0.0
        team, _ = subset_pool(pool, ids)
        report = solve(team, dataset, config, gateway=gateway)
        return report.accuracy or 0.0

    return performance


def attribution_eval(pool: Sequence[AgentSpec], dataset: Dataset,
                     config: RunConfig, subset_size: int = 3,
                     n_combos: int = 3, seed: int = 0,
                     gateway=None) -> List[dict]:
    """Compare importance scores against the Shapley oracle on random
    agent subsets; returns one row of KL / ListMLE numbers per subset."""
    ids = sorted(a.agent_id for a in pool)
    if len(ids) > 8:
        raise ConfigError("attribution evaluation is limited to pools of <= 8")
    rng = random.Random(seed)
    combos = set()
    budget = 0
    while len(combos) < n_combos and budget < 1000:
        combos.add(tuple(sorted(rng.sample(ids, subset_size))))
        budget += 1

    rows = []
    for combo in sorted(combos):
        team, mapping = subset_pool(pool, combo)
        sums = {a.agent_id: 0.0 for a in team}
        for query in dataset.entries:
            _, report = importance_for_query(team, query, config, gateway=gateway)
            for agent_id, value in report.per_agent.items():
                sums[agent_id] += value
        mean_importance = ImportanceReport(
            per_node={}, layer_sums={},
            per_agent={a: v / len(dataset.entries) for a, v in sums.items()},
        )
        perf = make_performance_fn(pool, dataset, config, gateway=gateway)
        shap = shapley(
            team,
            lambda subset: perf(tuple(mapping[i] for i in subset)),
        )
        kl_imp, lml_imp = agreement_metrics(mean_importance, shap)
        uniform = ImportanceReport(
            per_node={}, layer_sums={},
            per_agent={a.agent_id: 1.0 / len(team) for a in team},
        )
        kl_uni, lml_uni = agreement_metrics(uniform, shap)
        rows.append({
            "combo": [mapping[i] for i in sorted(mapping)],
            "kl_importance": kl_imp,
            "kl_uniform": kl_uni,
            "listmle_importance": lml_imp,
            "listmle_uniform": lml_uni,
            "shapley": {str(mapping[i]): v for i, v in shap.per_agent.items()},
            "importance": {
                str(mapping[i]): v
                for i, v in mean_importance.per_agent.items()
            },
        })
    return rows


# ---------------------------------------------------------------------------
# reporting


def report_dir(transcript_dir: str) -> dict:
    """Aggregate all transcript documents under a directory."""
    rows = []
    for path in sorted(Path(transcript_dir).rglob("*.json")):
        doc = json.loads(path.read_text())
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(
                f"{path}: schema version {version!r} needs migration"
            )
        if "query_id" in doc:
            rows.append(doc)

    graded = [r["correct"] for r in rows if r.get("correct") is not None]
    histogram: Dict[str, int] = {}
    for row in rows:
        if row.get("stop_step") is not None:
            key = str(row["stop_step"])
            histogram[key] = histogram.get(key, 0) + 1
    calls = [r["api_calls"] for r in rows if r.get("api_calls") is not None]
    return {
        "transcripts": len(rows),
        "accuracy": (sum(graded) / len(graded)) if graded else None,
        "mean_api_calls": (sum(calls) / len(calls)) if calls else None,
        "stop_step_histogram": histogram,
    }
