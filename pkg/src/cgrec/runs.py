"""Run directory layout and the artifacts written into it.

    <run>/config.yaml         snapshot of the RunConfig used
    <run>/seeds.json          every seed the run consumed
    <run>/model.pt            best-epoch checkpoint
    <run>/metrics_log.tsv     per-epoch loss, per-domain loss, validation metrics
    <run>/gamma.tsv           gamma trajectory (re-balanced variants only)
    <run>/train_report.json   best epoch, step counts, exclusions
    <run>/eval/               metrics.tsv, summary.json, cases.tsv
"""

from __future__ import annotations

import json
import logging
import shutil
from pathlib import Path

import pandas as pd

from .config import RunConfig, config_hash, dump_config, load_run_config
from .errors import ArtifactError
from .evaluator import EvalReport, RankedCase, write_report
from .model import save_checkpoint
from .sequence_store import HierVocab
from .trainer import FitResult

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.yaml"
SEEDS_FILE = "seeds.json"
CHECKPOINT_FILE = "model.pt"
METRICS_LOG = "metrics_log.tsv"
GAMMA_LOG = "gamma.tsv"
TRAIN_REPORT = "train_report.json"
EVAL_DIR = "eval"


class RunDirectory:
    """One training run on disk."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)

    @classmethod
    def create(cls, root: Path, overwrite: bool = False) -> RunDirectory:
        """Create an empty run directory.

        Raises:
            ArtifactError: the directory already holds files and ``overwrite`` is off
        """
        root = Path(root)
        if root.exists() and any(root.iterdir()):
            if not overwrite:
                raise ArtifactError(f"{root} is not empty; set overwrite=true to replace it")
            logger.info("replacing run directory", extra={"path": str(root)})
            shutil.rmtree(root)
        root.mkdir(parents=True, exist_ok=True)
        return cls(root)

    @property
    def checkpoint(self) -> Path:
        return self.root / CHECKPOINT_FILE

    @property
    def eval_dir(self) -> Path:
        return self.root / EVAL_DIR

    def write_config(self, config: RunConfig) -> Path:
        path = self.root / CONFIG_FILE
        path.write_text(dump_config(config), encoding="utf-8")
        return path

    def write_seeds(self, config: RunConfig) -> Path:
        seeds = {
            "train": config.train.seed,
            "eval": config.train.seed if config.eval.seed is None else config.eval.seed,
            "synth": config.synth.seed,
            "config_hash": config_hash(config),
        }
        path = self.root / SEEDS_FILE
        path.write_text(json.dumps(seeds, indent=2), encoding="utf-8")
        return path

    def write_training(self, result: FitResult, vocab: HierVocab) -> list[Path]:
        """Checkpoint, per-epoch log, gamma trajectory and the training summary."""
        report = result.report
        written = [self.checkpoint]
        save_checkpoint(
            self.checkpoint,
            result.model,
            vocab,
            gamma=result.gamma.to_dict() if result.model.config.variant.uses_gamma else None,
            extra={"best_epoch": report.best_epoch, "best_metric": report.best_metric},
        )

        metrics_path = self.root / METRICS_LOG
        report.epoch_frame(vocab.domain_names).to_csv(metrics_path, sep="\t", index=False, float_format="%.6f")
        written.append(metrics_path)

        if result.model.config.variant.uses_gamma:
            gamma_path = self.root / GAMMA_LOG
            frame = report.gamma_frame()
            frame.columns = ["step", *[f"gamma_{name}" for name in vocab.domain_names]]
            frame.to_csv(gamma_path, sep="\t", index=False, float_format="%.8f")
            written.append(gamma_path)

        summary = {
            "metric": report.metric,
            "best_epoch": report.best_epoch,
            "best_metric": report.best_metric,
            "best_valid": report.best_valid.to_dict() if report.best_valid else None,
            "epochs_run": len(report.epochs),
            "steps": report.steps,
            "gamma_refreshes": report.gamma_refreshes,
            "excluded_sequences": report.excluded,
            "train_rows": report.train_rows,
            "final_gamma": result.gamma.weights.tolist(),
        }
        report_path = self.root / TRAIN_REPORT
        report_path.write_text(json.dumps(summary, indent=2), encoding="utf-8")
        written.append(report_path)
        for path in written:
            logger.info("wrote artifact", extra={"path": str(path)})
        return written

    def write_eval(self, report: EvalReport, cases: list[RankedCase] | None = None) -> Path:
        write_report(report, self.eval_dir, cases)
        logger.info("wrote evaluation", extra={"path": str(self.eval_dir)})
        return self.eval_dir

    def read_gamma(self) -> pd.DataFrame:
        """Gamma trajectory of the run.

        Raises:
            ArtifactError: the run has no gamma log
        """
        path = self.root / GAMMA_LOG
        if not path.is_file():
            raise ArtifactError(f"{self.root}: no {GAMMA_LOG} (run a re-balanced variant first)")
        return pd.read_csv(path, sep="\t")

    def read_eval(self) -> EvalReport:
        path = self.eval_dir / "summary.json"
        if not path.is_file():
            raise ArtifactError(f"{self.root}: no evaluation summary at {path}")
        return EvalReport.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def read_config(self) -> RunConfig:
        path = self.root / CONFIG_FILE
        if not path.is_file():
            raise ArtifactError(f"{self.root}: no {CONFIG_FILE}")
        return load_run_config(path)
