"""Mini-batch training with Shapley-driven loss re-balancing.

One step: sample negatives; for the re-balanced variants evaluate every
domain coalition on the batch (forward only, dropout off), take exact Shapley
values and refresh gamma; then compute the variant's loss and take one Adam
step.
"""

from __future__ import annotations

import copy
import logging
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch

from .batching import SequenceBatch
from .coalition_game import GammaState, char_table, negative_transfer_report, shapley_exact, update_gamma
from .config import EvalConfig, TrainConfig
from .errors import EmptyBatchError, EmptyDatasetError, EncodingError, TrainingDivergedError
from .evaluator import EvalReport, evaluate
from .model import CGRecModel, build_model, levels_for
from .predictor import LevelRanges, LossTerms, sample_negatives
from .sequence_store import (
    DomainHybridSequence,
    HierVocab,
    LeaveOneOutSplit,
    SplitResult,
    pad_truncate,
    split_corpus,
)

logger = logging.getLogger(__name__)


def rebalanced_loss(terms: LossTerms, gamma: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Loss terms weighted by the gamma entry of their target domain.

    Gamma is detached: no gradient flows into the weights.

    Raises:
        EncodingError: a valid term is tagged with a domain outside 1..D
    """
    weights = torch.as_tensor(gamma, dtype=terms.values.dtype, device=terms.values.device).detach()
    tags = terms.domains[terms.valid.any(dim=-1)]
    if tags.numel() and (int(tags.min()) < 1 or int(tags.max()) > weights.numel()):
        raise EncodingError(f"domain tags must lie in 1..{weights.numel()}")
    return terms.weighted(weights)


@dataclass
class StepLog:
    step: int
    loss: float
    domain_loss: dict[int, float]
    gamma: list[float]
    phi: list[float] | None
    terms: int
    skipped: int


def train_step(
    batch: SequenceBatch,
    model: CGRecModel,
    optimizer: torch.optim.Optimizer,
    gamma: GammaState,
    ranges: LevelRanges,
    generator: torch.Generator,
    step: int = 0,
) -> tuple[GammaState, StepLog]:
    """One optimizer step on ``batch``; the model is updated in place.

    Returns:
        The (possibly refreshed) gamma state and the step log

    Raises:
        TrainingDivergedError: the loss is not finite
    """
    config = model.config
    levels = levels_for(config, model.depth)
    negatives = sample_negatives(batch, ranges, generator)

    phi = None
    if config.variant.uses_gamma:
        table = char_table(batch, model, negatives, gamma.num_domains, levels, config.normalize_char_value)
        phi = shapley_exact(table)
        if not np.all(np.isfinite(phi)):
            singles = {d: -table.values[1 << (d - 1)] for d in range(1, gamma.num_domains + 1)}
            raise TrainingDivergedError(step, gamma.weights.tolist(), singles)
        gamma = update_gamma(gamma, phi)
        if table.empty:
            logger.debug("coalitions without targets", extra={"step": step, "coalitions": sorted(table.empty)})

    model.train()
    unweighted, terms = model.loss(batch, negatives, levels)
    loss = rebalanced_loss(terms, gamma.weights) if config.variant.uses_gamma else unweighted
    domain_loss = terms.per_domain(gamma.num_domains)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(step, gamma.weights.tolist(), domain_loss)

    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    model.pin_padding()

    log = StepLog(
        step=step,
        loss=float(loss.detach()),
        domain_loss=domain_loss,
        gamma=gamma.weights.tolist(),
        phi=None if phi is None else phi.tolist(),
        terms=terms.count(),
        skipped=negatives.skipped,
    )
    logger.debug("train step", extra={"step": step, "loss": log.loss, "gamma": log.gamma})
    return gamma, log


@dataclass
class EpochLog:
    epoch: int
    loss: float
    domain_loss: dict[int, float]
    gamma: list[float]
    valid: dict[str, float] | None = None


@dataclass
class TrainingReport:
    metric: str
    epochs: list[EpochLog] = field(default_factory=list)
    gamma_history: list[GammaState] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = float("-inf")
    best_valid: EvalReport | None = None
    steps: int = 0
    gamma_refreshes: int = 0
    excluded: int = 0
    train_rows: int = 0

    def epoch_frame(self, domain_names: Sequence[str]) -> pd.DataFrame:
        rows = []
        for e in self.epochs:
            row = {"epoch": e.epoch, "loss": e.loss}
            row.update({f"loss_{name}": e.domain_loss.get(d, 0.0) for d, name in enumerate(domain_names, start=1)})
            if e.valid is not None:
                row.update({f"valid_{k}": v for k, v in e.valid.items()})
            rows.append(row)
        return pd.DataFrame(rows)

    def gamma_frame(self) -> pd.DataFrame:
        return negative_transfer_report(self.gamma_history)


@dataclass
class FitResult:
    model: CGRecModel
    report: TrainingReport
    splits: list[LeaveOneOutSplit]
    gamma: GammaState


@contextmanager
def _determinism(config: TrainConfig) -> Iterator[None]:
    """Seed torch and, when strict, pin one thread and deterministic kernels until exit."""
    torch.manual_seed(config.seed)
    threads = torch.get_num_threads()
    deterministic = torch.are_deterministic_algorithms_enabled()
    if config.strict_determinism:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(threads)
        torch.use_deterministic_algorithms(deterministic)


def fit(
    sequences: Sequence[DomainHybridSequence],
    vocab: HierVocab,
    config: TrainConfig,
    eval_config: EvalConfig | None = None,
    min_length: int = 3,
) -> FitResult:
    """Train on leave-one-out prefixes and keep the epoch with the best validation metric.

    Raises:
        EmptyDatasetError: nothing left to train on after splitting

    Torch thread count and deterministic-kernel settings are restored on return.
    """
    eval_config = eval_config or EvalConfig()
    split = split_corpus(sequences, min_length)
    if not split.splits:
        raise EmptyDatasetError("no sequence has enough interactions for a leave-one-out split")
    trainable = [s for s in split.splits if len(s.train) >= 2]
    if not trainable:
        raise EmptyDatasetError("no training prefix has a next-item target")

    with _determinism(config):
        return _train(split, trainable, vocab, config, eval_config)


def _train(
    split: SplitResult,
    trainable: list[LeaveOneOutSplit],
    vocab: HierVocab,
    config: TrainConfig,
    eval_config: EvalConfig,
) -> FitResult:
    model = build_model(vocab, config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    ranges = LevelRanges.from_vocab(vocab)
    neg_gen = torch.Generator().manual_seed(config.seed)
    shuffle_gen = torch.Generator().manual_seed(config.seed + 1)
    eval_seed = config.seed if eval_config.seed is None else eval_config.seed

    rows = SequenceBatch.from_padded(
        [pad_truncate(s.train, config.max_len) for s in trainable], vocab.depth, [s.user_id for s in trainable]
    )
    gamma = GammaState.uniform(vocab.num_domains, config.alpha, config.beta, config.temperature)
    report = TrainingReport(
        metric=config.validation_metric,
        gamma_history=[gamma],
        excluded=split.excluded,
        train_rows=rows.size,
    )
    best_state = copy.deepcopy(model.state_dict())
    best_gamma = gamma
    stale = 0

    logger.info(
        "training",
        extra={
            "variant": config.variant.value,
            "users": len(split.splits),
            "train_rows": rows.size,
            "domains": vocab.num_domains,
            "levels": levels_for(config, vocab.depth),
        },
    )
    for epoch in range(1, config.epochs + 1):
        order = torch.randperm(rows.size, generator=shuffle_gen)
        losses: list[float] = []
        domain_sums = {d: 0.0 for d in range(1, vocab.num_domains + 1)}
        for start in range(0, rows.size, config.batch_size):
            batch = rows.select(order[start : start + config.batch_size])
            if not bool(batch.target_mask.any()):
                continue
            try:
                gamma, log = train_step(batch, model, optimizer, gamma, ranges, neg_gen, report.steps)
            except EmptyBatchError:
                logger.debug("batch without usable terms", extra={"epoch": epoch, "offset": start})
                continue
            report.steps += 1
            losses.append(log.loss)
            for d, v in log.domain_loss.items():
                domain_sums[d] += v
            if log.phi is not None:
                report.gamma_refreshes += 1
                report.gamma_history.append(gamma)

        entry = EpochLog(
            epoch=epoch,
            loss=float(np.mean(losses)) if losses else float("nan"),
            domain_loss={d: v / max(len(losses), 1) for d, v in domain_sums.items()},
            gamma=gamma.weights.tolist(),
        )
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            valid, _ = evaluate(split.splits, model, vocab, eval_seed, eval_config, stage="valid")
            entry.valid = dict(valid.overall)
            score = valid.overall[config.validation_metric]
            if score > report.best_metric:
                report.best_metric, report.best_epoch, report.best_valid = score, epoch, valid
                best_state = copy.deepcopy(model.state_dict())
                best_gamma = gamma
                stale = 0
            else:
                stale += 1
        report.epochs.append(entry)
        logger.info(
            "epoch done",
            extra={"epoch": epoch, "loss": entry.loss, "gamma": entry.gamma, "valid": entry.valid},
        )
        if config.patience is not None and stale >= config.patience:
            logger.info("stopping early", extra={"epoch": epoch, "best_epoch": report.best_epoch})
            break

    model.load_state_dict(best_state)
    model.eval()
    return FitResult(model=model, report=report, splits=split.splits, gamma=best_gamma)
