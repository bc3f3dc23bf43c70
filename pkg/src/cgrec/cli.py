"""Command line entry point.

    cgrec synth  --config run.yaml
    cgrec ingest --config run.yaml --override data.events=events.tsv data.manifest=manifest.yaml
    cgrec train  --config run.yaml --override train.variant=bsa output_dir=runs/bsa
    cgrec eval   --config run.yaml --run runs/bsa
    cgrec ablate --config run.yaml
    cgrec plot   runs/bsa runs/full --out figures/ndcg.png

Every command reads the same RunConfig; flags only select files and
overrides. Exit status is 0 on success, 2 for configuration or usage errors
and 1 for any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

import pandas as pd

from . import __version__
from .config import METRIC_NAMES, RunConfig, load_run_config
from .errors import ArtifactError, CGRecError, ConfigError
from .evaluator import EvalReport, average_reports, evaluate, relative_gain_table
from .logs import configure_logging
from .model import load_checkpoint
from .plotting import plot_gamma_trajectory, plot_metric_bars
from .runs import RunDirectory
from .sequence_store import (
    Corpus,
    DomainHybridSequence,
    HierVocab,
    dataset_statistics,
    filter_min_per_domain,
    ingest_files,
    split_corpus,
)
from .synthgen import generate, write_dataset
from .trainer import fit

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

EVENTS_FILE = "events.tsv"
MANIFEST_FILE = "manifest.yaml"
STATS_FILE = "dataset_stats.tsv"


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def load_corpus(config: RunConfig) -> Corpus:
    """Ingest the configured dataset and apply the per-domain filter.

    Raises:
        ConfigError: ``data.events`` or ``data.manifest`` is unset
    """
    data = config.data
    if data.events is None or data.manifest is None:
        raise ConfigError("data.events and data.manifest must both be set")
    for path in (data.events, data.manifest):
        if not Path(path).is_file():
            raise ArtifactError(f"input file not found: {path}")
    corpus = ingest_files(data.events, data.manifest)
    if data.min_per_domain:
        before = len(corpus.sequences)
        corpus.sequences = filter_min_per_domain(corpus.sequences, data.min_per_domain, corpus.vocab.num_domains)
        logger.info(
            "filtered sequences by per-domain minimum",
            extra={
                "min_per_domain": data.min_per_domain,
                "kept": len(corpus.sequences),
                "dropped": before - len(corpus.sequences),
            },
        )
    return corpus


def _write_stats(sequences: Sequence[DomainHybridSequence], vocab: HierVocab, directory: Path) -> Path:
    path = directory / STATS_FILE
    dataset_statistics(sequences, vocab).to_csv(path, sep="\t", index=False, float_format="%.6f")
    logger.info("wrote artifact", extra={"path": str(path)})
    return path


def train_and_evaluate(config: RunConfig, corpus: Corpus, root: Path) -> EvalReport:
    """Train one run into ``root`` and evaluate its best checkpoint on the test targets."""
    run = RunDirectory.create(root, config.overwrite)
    run.write_config(config)
    run.write_seeds(config)
    result = fit(corpus.sequences, corpus.vocab, config.train, config.eval, config.data.min_length)
    run.write_training(result, corpus.vocab)
    seed = config.train.seed if config.eval.seed is None else config.eval.seed
    report, cases = evaluate(result.splits, result.model, corpus.vocab, seed, config.eval, stage="test")
    report.meta.update({"variant": config.train.variant.value, "train_seed": config.train.seed})
    run.write_eval(report, cases if config.eval.dump_cases else None)
    return report


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(config: RunConfig, args: argparse.Namespace) -> int:
    run = RunDirectory.create(config.output_dir, config.overwrite)
    run.write_config(config)
    out = run.root
    dataset = generate(config.synth)
    events, manifest = out / EVENTS_FILE, out / MANIFEST_FILE
    lines = write_dataset(dataset, events, manifest)
    _write_stats(dataset.sequences, dataset.vocab, out)
    logger.info("wrote synthetic dataset", extra={"events": str(events), "manifest": str(manifest), "lines": lines})
    return EXIT_OK


def cmd_ingest(config: RunConfig, args: argparse.Namespace) -> int:
    run = RunDirectory.create(config.output_dir, config.overwrite)
    run.write_config(config)
    out = run.root
    corpus = load_corpus(config)
    split = split_corpus(corpus.sequences, config.data.min_length)
    _write_stats(corpus.sequences, corpus.vocab, out)
    report = {
        "users": len(corpus.sequences),
        "interactions": sum(len(s) for s in corpus.sequences),
        "rejected": [{"line_no": r.line_no, "reason": r.reason} for r in corpus.rejected],
        "excluded_short": split.excluded,
        "evaluable_users": len(split.splits),
        "vocab_hash": corpus.vocab.fingerprint(),
    }
    path = out / "ingest_report.json"
    path.write_text(json.dumps(report, indent=2), encoding="utf-8")
    logger.info("wrote artifact", extra={"path": str(path)})
    return EXIT_OK


def cmd_train(config: RunConfig, args: argparse.Namespace) -> int:
    corpus = load_corpus(config)
    report = train_and_evaluate(config, corpus, config.output_dir)
    logger.info("test metrics", extra={"overall": report.overall})
    return EXIT_OK


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> int:
    run = RunDirectory(args.run or config.output_dir)
    if not run.checkpoint.is_file():
        raise ArtifactError(f"{run.root}: no checkpoint to evaluate")
    run_config = run.read_config()
    # evaluation knobs come from the invocation; the data location too when given
    data = config.data if config.data.events is not None else run_config.data
    run_config = run_config.model_copy(update={"eval": config.eval, "data": data})
    corpus = load_corpus(run_config)
    checkpoint = load_checkpoint(run.checkpoint, corpus.vocab)
    split = split_corpus(corpus.sequences, run_config.data.min_length)
    seed = checkpoint.config.seed if config.eval.seed is None else config.eval.seed
    report, cases = evaluate(split.splits, checkpoint.model, corpus.vocab, seed, config.eval, stage=args.stage)
    report.meta.update({"variant": checkpoint.config.variant.value, "train_seed": checkpoint.config.seed})
    run.write_eval(report, cases if config.eval.dump_cases else None)
    logger.info("evaluation metrics", extra={"overall": report.overall, "stage": args.stage})
    return EXIT_OK


def ablation_table(reports: dict[str, EvalReport], metric: str = "ndcg@5") -> pd.DataFrame:
    """One row per variant and domain."""
    rows = [
        {"variant": variant, "domain": domain, metric: values[metric]}
        for variant, report in reports.items()
        for domain, values in report.metrics.items()
    ]
    return pd.DataFrame(rows, columns=["variant", "domain", metric])


def cmd_ablate(config: RunConfig, args: argparse.Namespace) -> int:
    root = RunDirectory.create(config.output_dir, config.overwrite)
    root.write_config(config)
    corpus = load_corpus(config)
    per_variant: dict[str, EvalReport] = {}
    for variant in config.ablation.variants:
        reports = []
        for seed in config.ablation.seeds:
            sub_dir = root.root / f"{variant.value}-s{seed}"
            sub = config.model_copy(
                update={
                    "output_dir": sub_dir,
                    "train": config.train.model_copy(update={"variant": variant, "seed": seed}),
                }
            )
            logger.info("ablation run", extra={"variant": variant.value, "seed": seed})
            reports.append(train_and_evaluate(sub, corpus, sub_dir))
        per_variant[variant.value] = average_reports(reports)

    table_path = root.root / "ablation.tsv"
    ablation_table(per_variant).to_csv(table_path, sep="\t", index=False, float_format="%.6f")
    written = [table_path]
    reference = config.ablation.reference.value
    if reference in per_variant:
        gain_path = root.root / "relative_gain.tsv"
        relative_gain_table(per_variant, reference).to_csv(gain_path, sep="\t", index=False, float_format="%.4f")
        written.append(gain_path)
    else:
        logger.warning("reference variant not in ablation; skipping gains", extra={"reference": reference})
    for path in written:
        logger.info("wrote artifact", extra={"path": str(path)})
    return EXIT_OK


def cmd_plot(config: RunConfig, args: argparse.Namespace) -> int:
    runs = [Path(p) for p in args.runs] or [config.output_dir]
    missing = [p for p in runs if not p.is_dir()]
    if missing:
        raise ArtifactError(f"not a run directory: {', '.join(map(str, missing))}")
    written = []
    for run in runs:
        if (run / "gamma.tsv").is_file():
            written.append(plot_gamma_trajectory(run))
    with_eval = [run for run in runs if (run / "eval" / "summary.json").is_file()]
    if with_eval:
        out = Path(args.out) if args.out else with_eval[0].parent / f"{args.metric.replace('@', '')}_bars.png"
        written.append(plot_metric_bars(with_eval, out, args.metric))
    if not written:
        raise ArtifactError(f"nothing to plot in {', '.join(map(str, runs))}: no gamma log or evaluation found")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON RunConfig")
    common.add_argument(
        "--override",
        nargs="+",
        action="extend",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config overrides, e.g. train.variant=bsa",
    )
    common.add_argument("--log-level", help="overrides logging.level")
    common.add_argument("--log-format", choices=["json", "text"], help="overrides logging.format")

    parser = argparse.ArgumentParser(prog="cgrec", description="Cross-domain sequential recommendation experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a synthetic multi-domain dataset")
    sub.add_parser("ingest", parents=[common], help="validate an event log and report dataset statistics")
    sub.add_parser("train", parents=[common], help="train one variant and evaluate it")

    p_eval = sub.add_parser("eval", parents=[common], help="re-evaluate a trained run")
    p_eval.add_argument("--run", type=Path, help="run directory (defaults to output_dir)")
    p_eval.add_argument("--stage", choices=["valid", "test"], default="test")

    sub.add_parser("ablate", parents=[common], help="train every configured variant and seed")

    p_plot = sub.add_parser("plot", parents=[common], help="plot gamma trajectories and metric bars")
    p_plot.add_argument("runs", nargs="*", help="run directories (defaults to output_dir)")
    p_plot.add_argument("--out", type=Path, help="metric bar chart path")
    p_plot.add_argument("--metric", choices=list(METRIC_NAMES), default="ndcg@5")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_run_config(args.config, args.override)
    except ConfigError as e:
        configure_logging(args.log_level or "INFO", args.log_format or "text")
        logger.error("invalid configuration", extra={"error": str(e)})
        return EXIT_USAGE

    configure_logging(args.log_level or config.logging.level, args.log_format or config.logging.format)
    logger.info("starting", extra={"command": args.command, "output_dir": str(config.output_dir)})
    try:
        return COMMANDS[args.command](config, args)
    except ConfigError as e:
        logger.error("invalid configuration", extra={"error": str(e)})
        return EXIT_USAGE
    except CGRecError as e:
        logger.error(f"{args.command} failed: {e}", extra={"error_type": type(e).__name__})
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
