#!/usr/bin/env python3
"""
Command-line entry point for the DP-Fair toolkit.

    dpfair generate | ingest | train | recommend | rerank | evaluate | sweep | accountant | report | run

Every subcommand reads the experiment config (``--config``, ``--set key.path=value``)
and writes its artifacts under ``<artifact_dir>/<config_hash[:12]>/`` unless told
otherwise. Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd
from rich.console import Console
from rich.table import Table

from scripts.dpfair.config import ExperimentConfig, artifact_dir, data_dir, load_config, parse_override
from scripts.dpfair.data import FEEDBACK_MODES, group_users, load_bundle, save_bundle
from scripts.dpfair.errors import EXIT_OK, ConfigError, DataError, DPFairError, exit_code_for
from scripts.dpfair.experiment import (
    candidate_exclusions,
    collect_reports,
    ingest,
    rerank,
    run_dir,
    run_experiment,
    stage,
    sweep,
    train_model,
    with_certificate,
)
from scripts.dpfair.metrics import evaluate_lists, relevance_labels, report_frame
from scripts.dpfair.model import load_checkpoint
from scripts.dpfair.privacy import check_delta, privacy_spec_for
from scripts.dpfair.rerank import save_instance, save_solution
from scripts.dpfair.train import RecLists, top_k_lists
from scripts.utils.artifact_io import read_json, run_stamp, save_csv, split_ints, write_json

logger = logging.getLogger("dpfair")
console = Console()


# -------------------------------------------------------------------
# Helpers
# -------------------------------------------------------------------
def _config(args: argparse.Namespace) -> ExperimentConfig:
    overrides: dict = {}
    for text in args.set or []:
        _merge_into(overrides, parse_override(text))
    config = load_config(args.config, overrides or None)
    if not args.no_progress:
        config = replace(config, train=replace(config.train, progress=True))
    return config


def _merge_into(base: dict, update: dict):
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge_into(base[key], value)
        else:
            base[key] = value


def _out_dir(args: argparse.Namespace, config: ExperimentConfig) -> Path:
    root = Path(args.artifacts) if args.artifacts else artifact_dir()
    return run_dir(config, root)


def _bundle_dir(args: argparse.Namespace, config: ExperimentConfig) -> Path:
    return Path(args.bundle) if args.bundle else _out_dir(args, config) / "bundle"


def _report_table(df: pd.DataFrame, title: str) -> Table:
    table = Table(title=title)
    columns = [c for c in ("param", "value", "algorithm", "epsilon", "metric", "total", "active", "inactive", "gap", "error") if c in df.columns]
    for c in columns:
        table.add_column(c, justify="right" if c not in ("algorithm", "metric", "param", "error") else "left")
    for row in df[columns].itertuples(index=False):
        table.add_row(*["" if pd.isna(v) else str(v) for v in row])
    return table


def _solution_lists(path: Path, n1: int) -> list:
    df = pd.read_csv(path, dtype={"items": str}, keep_default_na=False)
    lists = [[] for _ in range(n1)]
    for row in df.itertuples(index=False):
        lists[int(row.user)] = split_ints(row.items)
    return lists


# -------------------------------------------------------------------
# Subcommands
# -------------------------------------------------------------------
def cmd_generate(args: argparse.Namespace) -> int:
    from scripts.data_generation.a1_1_synthetic_interactions_generator import (
        INTERACTION_COLUMNS,
        generate_interactions,
    )

    config = _config(args)
    df = generate_interactions(**asdict(config.synthetic), seed=config.seed)
    out = Path(args.out) if args.out else data_dir() / f"interactions_synthetic_{run_stamp()}.csv"
    save_csv(df, out, INTERACTION_COLUMNS)
    console.print(f"✅ {len(df)} interactions for {df['user'].nunique()} users written to {out}")
    return EXIT_OK


def cmd_ingest(args: argparse.Namespace) -> int:
    if args.input:
        args.set = [*(args.set or []), "dataset.source=csv", f"dataset.path={args.input}"]
    if args.feedback:
        args.set = [*(args.set or []), f"dataset.feedback={args.feedback}"]
    config = _config(args)
    dataset, rejected = ingest(config)
    out = Path(args.out) if args.out else _bundle_dir(args, config)
    with stage("ingest"):
        save_bundle(dataset, out)
        if rejected:
            rows = pd.DataFrame([asdict(r) for r in rejected])
            save_csv(rows, out / "rejected.csv", list(rows.columns))
    console.print(f"✅ Bundle written to {out} ({len(rejected)} rows rejected)")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _config(args)
    with stage("train"):
        dataset = load_bundle(_bundle_dir(args, config))
    out = Path(args.out) if args.out else _out_dir(args, config)
    result = train_model(config, dataset, checkpoint_dir=out / "checkpoints")
    with stage("train"):
        write_json(result.log, out / "train_log.json")
        write_json(result.privacy.certificate(), out / "privacy.json")
    console.print(
        f"✅ Checkpoint {result.checkpoint} (epsilon={result.privacy.epsilon:.4f}, z={result.privacy.noise_multiplier:.4f})"
    )
    return EXIT_OK


def cmd_recommend(args: argparse.Namespace) -> int:
    config = _config(args)
    out_dir = _out_dir(args, config)
    with stage("recommend"):
        dataset = load_bundle(_bundle_dir(args, config))
        checkpoint = Path(args.checkpoint) if args.checkpoint else out_dir / "checkpoints" / "final"
        params, _, _ = load_checkpoint(checkpoint)
        lists = top_k_lists(params, dataset, config.rerank.K, exclude=candidate_exclusions(config))
        out = lists.save(Path(args.out) if args.out else out_dir / "rec_lists.csv")
    console.print(f"✅ Top-{lists.K} lists written to {out}")
    return EXIT_OK


def cmd_rerank(args: argparse.Namespace) -> int:
    config = _config(args)
    out_dir = Path(args.out) if args.out else _out_dir(args, config)
    with stage("rerank"):
        dataset = load_bundle(_bundle_dir(args, config))
        lists_path = Path(args.lists) if args.lists else _out_dir(args, config) / "rec_lists.csv"
        lists = RecLists.load(lists_path, dataset.n1, config.rerank.K)
    instance, baseline, fair = rerank(config, lists, dataset, group_users(dataset))
    with stage("rerank"):
        save_instance(instance, out_dir / "rerank_instance.csv")
        save_solution(instance, baseline, out_dir / "solution_truncated.csv")
        save_solution(instance, fair, out_dir / "solution_reranked.csv")
    status = "feasible" if fair.feasible else f"infeasible, solved at gap {float(fair.alpha_used):.5f}"
    console.print(f"✅ Re-ranked gap {fair.gap_float:.5f} (truncation {baseline.gap_float:.5f}, {status})")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _config(args)
    out_dir = _out_dir(args, config)
    solutions = dict(s.split("=", 1) for s in args.solution) if args.solution else {
        "DP-SGD": str(out_dir / "solution_truncated.csv"),
        "DP-Fair": str(out_dir / "solution_reranked.csv"),
    }
    with stage("evaluate"):
        dataset = load_bundle(_bundle_dir(args, config))
        labels = relevance_labels(dataset, "test")
        groups = group_users(dataset)
        privacy_path = out_dir / "privacy.json"
        if not privacy_path.exists():
            raise DataError(f"Missing accountant certificate {privacy_path}; run train first")
        certificate = read_json(privacy_path)
        epsilon = config.epsilon if config.epsilon is not None else certificate["epsilon"]
        frames = []
        for algorithm, path in solutions.items():
            path = Path(path)
            lists = _solution_lists(path, dataset.n1)
            reports = evaluate_lists(lists, labels, groups, config.rerank.k)
            frame = report_frame(reports, config.dataset.name, config.train.scorer, algorithm, epsilon)
            outcome = read_json(path.with_suffix(".json")) if path.with_suffix(".json").exists() else {}
            frames.append(
                with_certificate(frame, certificate, outcome.get("alpha"), outcome.get("feasible"), config.hash)
            )
        report = pd.concat(frames, ignore_index=True)
        out = Path(args.out) if args.out else out_dir / "report.csv"
        out.parent.mkdir(parents=True, exist_ok=True)
        report.to_csv(out, index=False, lineterminator="\n")
    console.print(_report_table(report, f"Report ({config.dataset.name})"))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _config(args)
    root = Path(args.artifacts) if args.artifacts else artifact_dir()
    table = sweep(config, args.param, args.grid, artifact_root=root)
    console.print(_report_table(table, f"Sweep over {args.param}"))
    return EXIT_OK


def cmd_accountant(args: argparse.Namespace) -> int:
    if (args.z is None) == (args.epsilon is None):
        raise ConfigError("give exactly one of --z or --epsilon")
    if args.q is None and (args.batch is None or args.n is None):
        raise ConfigError("give --q, or --batch together with --n")
    if args.delta is None and args.n is None:
        raise ConfigError("give --delta, or --n to use delta = n^(-delta_exponent)")
    with stage("accountant"):
        q = args.q if args.q is not None else args.batch / args.n
        delta = args.delta if args.delta is not None else float(args.n) ** (-args.delta_exponent)
        if args.n is not None:
            check_delta(delta, args.n)
        spec = privacy_spec_for(args.z, args.epsilon, delta, q, args.steps, args.groups)
    report = spec.certificate()
    if args.out:
        write_json(report, Path(args.out))
    console.print_json(data={k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in report.items()})
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    root = Path(args.artifacts) if args.artifacts else artifact_dir()
    with stage("report"):
        df = collect_reports(root)
        if args.out:
            out = Path(args.out)
            out.parent.mkdir(parents=True, exist_ok=True)
            df.to_csv(out, index=False, lineterminator="\n")
    if df.empty:
        console.print(f"⚠️ No report.csv found below {root}")
    else:
        console.print(_report_table(df, f"Reports below {root}"))
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    config = _config(args)
    root = Path(args.artifacts) if args.artifacts else artifact_dir()
    result = run_experiment(config, artifact_root=root)
    console.print(_report_table(result.reports, f"Run {config.hash[:12]}"))
    return EXIT_OK


# -------------------------------------------------------------------
# Parser
# -------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpfair", description="DP-SGD recommenders with group-fair re-ranking")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML (default configs/dp_fair.yml)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, e.g. train.steps=500")
    common.add_argument("--artifacts", help="artifact root (default $DPFAIR_ARTIFACT_DIR or artifacts)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--no-progress", action="store_true", help="hide the training progress bar")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic skewed interaction log")
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ingest", parents=[common], help="raw interactions -> dataset bundle")
    p.add_argument("--input", help="user,item,value[,timestamp] CSV (overrides dataset.source)")
    p.add_argument("--feedback", choices=FEEDBACK_MODES, help="explicit for ratings (positive iff > 3), implicit for events")
    p.add_argument("--out")
    p.add_argument("--bundle", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", parents=[common], help="DP-SGD training from a bundle")
    p.add_argument("--bundle")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recommend", parents=[common], help="top-K candidate lists from a checkpoint")
    p.add_argument("--bundle")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("rerank", parents=[common], help="fairness-constrained re-ranking of top-K lists")
    p.add_argument("--bundle")
    p.add_argument("--lists")
    p.add_argument("--out")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("evaluate", parents=[common], help="NDCG@k / F1@k report per user group")
    p.add_argument("--bundle")
    p.add_argument("--solution", action="append", metavar="ALGORITHM=PATH")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common], help="grid over the clip bound or alpha")
    p.add_argument("--param", choices=["clip", "alpha"], required=True)
    p.add_argument("--grid", type=float, nargs="+", help="grid values (default from config)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("accountant", parents=[common], help="epsilon for z, or z for an epsilon target")
    p.add_argument("--z", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--delta-exponent", type=float, default=1.5)
    p.add_argument("--n", type=int, help="number of training examples")
    p.add_argument("--q", type=float, help="sampling rate")
    p.add_argument("--batch", type=int, help="expected batch size (q = batch / n)")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--groups", type=int, default=1, help="clip groups sharing one noise multiplier")
    p.add_argument("--out")
    p.set_defaults(func=cmd_accountant)

    p = sub.add_parser("report", parents=[common], help="collect every run's report.csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", parents=[common], help="ingest -> train -> recommend -> rerank -> evaluate")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s [%(levelname)s] %(message)s",
    )
    try:
        return args.func(args)
    except DPFairError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
