"""Command-line interface for the two-stage collaboration pipeline."""

from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Optional

import click

from . import harness
from .gateway import ChatGateway, GatewayConfig

log = logging.getLogger(__name__)


def _build_gateway(pool, ranker, fixtures: Optional[str], offline: bool,
                   endpoint: Optional[str], model: Optional[str]):
    needs_llm = any(a.backend == "llm" for a in pool)
    if ranker is not None and ranker.backend == "llm":
        needs_llm = True
    if not needs_llm:
        return None
    kwargs = {}
    if endpoint:
        kwargs["endpoint_url"] = endpoint
    if model:
        kwargs["model_name"] = model
    return ChatGateway(GatewayConfig(**kwargs), fixture_dir=fixtures,
                       offline=offline, record=fixtures is not None and not offline)


def _load_run_inputs(pool_path, team_path, config_path, seed, parallel):
    pool, ranker = harness.load_pool(pool_path)
    config = harness.load_config(config_path)
    if seed is not None:
        config = replace(config, seed=seed)
    if parallel is not None:
        config = replace(config, parallelism=parallel)
    if ranker is not None and config.ranker is None:
        config = replace(config, ranker=ranker)
    if team_path:
        team_doc = json.loads(Path(team_path).read_text())
        pool, _ = harness.subset_pool(pool, team_doc["team"])
    return pool, ranker, config


common_options = [
    click.option("--pool", "pool_path", required=True, type=click.Path(exists=True),
                 help="Pool definition file (JSON)."),
    click.option("--dataset", "dataset_path", required=True,
                 type=click.Path(exists=True), help="JSONL dataset."),
    click.option("--config", "config_path", type=click.Path(exists=True),
                 help="Run configuration file (JSON)."),
    click.option("--seed", type=int, default=None, help="Master seed override."),
    click.option("--parallel", type=int, default=None,
                 help="Agents executed concurrently within a layer."),
    click.option("--offline", is_flag=True,
                 help="Replay recorded gateway fixtures only."),
    click.option("--fixtures", type=click.Path(), default=None,
                 help="Gateway record/replay fixture directory."),
    click.option("--endpoint", default=None, help="Chat-completion endpoint URL."),
    click.option("--model", default=None, help="Backend model name."),
    click.option("--out", "out_dir", type=click.Path(), default=None,
                 help="Output directory."),
]


def _with_common(func):
    for option in reversed(common_options):
        func = option(func)
    return func


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Two-stage multi-agent collaboration: optimize a team, then solve."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@_with_common
@click.option("--k", type=int, required=True, help="Team size to select.")
@click.option("--group-by-tag", is_flag=True,
              help="Select one team per query tag.")
@click.option("--sample-fraction", type=float, default=None,
              help="Optimize on a random fraction of the dataset.")
def optimize(pool_path, dataset_path, config_path, seed, parallel, offline,
             fixtures, endpoint, model, out_dir, k, group_by_tag,
             sample_fraction):
    """Stage 1: run trials, score contributions, select top-k teams."""
    pool, ranker, config = _load_run_inputs(pool_path, None, config_path,
                                            seed, parallel)
    gateway = _build_gateway(pool, ranker, fixtures, offline, endpoint, model)
    dataset = harness.load_dataset(dataset_path)
    results = harness.optimize(pool, dataset, config, k,
                               group_by=group_by_tag,
                               sample_fraction=sample_fraction,
                               gateway=gateway)
    for group, result in results.items():
        click.echo(f"group {group}: team {result.team} "
                   f"(over {result.n_queries} queries)")
        if out_dir:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            name = "team.json" if group == "*" else f"team_{group}.json"
            (out / name).write_text(json.dumps(result.to_dict(), indent=2))


@main.command()
@_with_common
@click.option("--team", "team_path", type=click.Path(exists=True), default=None,
              help="Team file from a previous optimize run.")
def solve(pool_path, dataset_path, config_path, seed, parallel, offline,
          fixtures, endpoint, model, out_dir, team_path):
    """Stage 2: run the (selected) team over the dataset."""
    pool, ranker, config = _load_run_inputs(pool_path, team_path, config_path,
                                            seed, parallel)
    gateway = _build_gateway(pool, ranker, fixtures, offline, endpoint, model)
    dataset = harness.load_dataset(dataset_path)
    report = harness.solve(pool, dataset, config, gateway=gateway,
                           out_dir=out_dir)
    summary = report.to_dict()
    click.echo(f"queries: {len(report.rows)}")
    if summary["accuracy"] is not None:
        click.echo(f"accuracy: {summary['accuracy']:.3f}")
    click.echo(f"mean api calls: {summary['mean_api_calls']:.2f}")
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(summary, indent=2))


@main.command("attribution-eval")
@_with_common
@click.option("--subset-size", type=int, default=3, show_default=True)
@click.option("--combos", "n_combos", type=int, default=3, show_default=True)
def attribution_eval(pool_path, dataset_path, config_path, seed, parallel,
                     offline, fixtures, endpoint, model, out_dir,
                     subset_size, n_combos):
    """Compare importance scores against the Shapley oracle."""
    pool, ranker, config = _load_run_inputs(pool_path, None, config_path,
                                            seed, parallel)
    gateway = _build_gateway(pool, ranker, fixtures, offline, endpoint, model)
    dataset = harness.load_dataset(dataset_path)
    rows = harness.attribution_eval(
        pool, dataset, config, subset_size=subset_size, n_combos=n_combos,
        seed=config.seed, gateway=gateway,
    )
    click.echo(f"{'combo':<14}{'KL(imp)':>10}{'KL(unif)':>10}"
               f"{'LMLE(imp)':>11}{'LMLE(unif)':>11}")
    for row in rows:
        click.echo(f"{str(row['combo']):<14}{row['kl_importance']:>10.4f}"
                   f"{row['kl_uniform']:>10.4f}"
                   f"{row['listmle_importance']:>11.4f}"
                   f"{row['listmle_uniform']:>11.4f}")
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "attribution_eval.json").write_text(json.dumps(rows, indent=2))


@main.command()
@click.argument("transcript_dir", type=click.Path(exists=True))
def report(transcript_dir):
    """Summarize a directory of transcripts."""
    summary = harness.report_dir(transcript_dir)
    click.echo(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
