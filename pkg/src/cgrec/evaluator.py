"""Leave-one-out ranking evaluation.

The held-out item is ranked against sampled negatives the user never touched,
drawn from the held-out item's domain. Ties count against the positive.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
import torch

from .batching import SequenceBatch
from .config import METRIC_NAMES, EvalConfig
from .errors import EmptyDatasetError
from .model import CGRecModel
from .sequence_store import HierVocab, LeaveOneOutSplit

logger = logging.getLogger(__name__)

Stage = Literal["valid", "test"]


@dataclass(frozen=True)
class RankedCase:
    """Rank of one user's held-out item (1 = best) among its candidates."""

    user_id: str
    domain_id: int
    rank: int
    num_candidates: int
    deficit: int = 0


def hit_at(rank: np.ndarray | int, k: int) -> np.ndarray:
    return (np.asarray(rank) <= k).astype(np.float64)


def ndcg_at(rank: np.ndarray | int, k: int) -> np.ndarray:
    r = np.asarray(rank, dtype=np.float64)
    return np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0)


def case_metrics(ranks: np.ndarray) -> dict[str, float]:
    ranks = np.asarray(ranks, dtype=np.float64)
    return {
        "hr@5": float(hit_at(ranks, 5).mean()),
        "hr@10": float(hit_at(ranks, 10).mean()),
        "ndcg@5": float(ndcg_at(ranks, 5).mean()),
        "ndcg@10": float(ndcg_at(ranks, 10).mean()),
        "mrr": float((1.0 / ranks).mean()),
    }


@dataclass
class EvalReport:
    """Per-domain means of the ranking metrics, keyed by domain name."""

    metrics: dict[str, dict[str, float]]
    counts: dict[str, int]
    overall: dict[str, float]
    seed: int | None = None
    deficits: int = 0
    meta: dict[str, object] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def metric(self, name: str, domain: str | None = None) -> float:
        return self.overall[name] if domain is None else self.metrics[domain][name]

    def to_frame(self) -> pd.DataFrame:
        rows = [{"domain": d, "cases": self.counts[d], **self.metrics[d]} for d in self.metrics]
        rows.append({"domain": "all", "cases": self.total, **self.overall})
        return pd.DataFrame(rows, columns=["domain", "cases", *METRIC_NAMES])

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "counts": self.counts,
            "overall": self.overall,
            "seed": self.seed,
            "deficits": self.deficits,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> EvalReport:
        return cls(
            metrics={k: dict(v) for k, v in data["metrics"].items()},
            counts=dict(data["counts"]),
            overall=dict(data["overall"]),
            seed=data.get("seed"),
            deficits=data.get("deficits", 0),
            meta=dict(data.get("meta", {})),
        )


def aggregate(
    cases: Sequence[RankedCase], domain_names: Sequence[str] | None = None, seed: int | None = None
) -> EvalReport:
    """Average metrics per held-out domain."""
    if not cases:
        raise EmptyDatasetError("no evaluable cases to aggregate")
    by_domain: dict[int, list[int]] = {}
    for c in cases:
        by_domain.setdefault(c.domain_id, []).append(c.rank)

    def name(d: int) -> str:
        return domain_names[d - 1] if domain_names else str(d)

    metrics = {name(d): case_metrics(np.array(r)) for d, r in sorted(by_domain.items())}
    counts = {name(d): len(r) for d, r in sorted(by_domain.items())}
    overall = case_metrics(np.array([c.rank for c in cases]))
    return EvalReport(
        metrics=metrics, counts=counts, overall=overall, seed=seed, deficits=sum(c.deficit for c in cases)
    )


class CandidatePools:
    """Level-H ids eligible as negatives: per domain, or the whole catalogue."""

    def __init__(self, vocab: HierVocab, domain_restricted: bool = True) -> None:
        self.domain_restricted = domain_restricted
        self._per_domain: dict[int, np.ndarray] = {}
        for d in range(1, vocab.num_domains + 1):
            lo, hi = vocab.range_of(d, vocab.depth)
            self._per_domain[d] = np.arange(lo, hi + 1)
        self._all = np.arange(1, vocab.table_size(vocab.depth))

    def pool(self, domain_id: int) -> np.ndarray:
        return self._per_domain[domain_id] if self.domain_restricted else self._all

    def sample(
        self, domain_id: int, exclude: set[int], n: int, rng: np.random.Generator
    ) -> tuple[np.ndarray, int]:
        """``n`` distinct negatives outside ``exclude``; returns (ids, shortfall)."""
        pool = self.pool(domain_id)
        eligible = pool[~np.isin(pool, np.fromiter(exclude, dtype=np.int64, count=len(exclude)))]
        take = min(n, len(eligible))
        return rng.choice(eligible, size=take, replace=False), n - take


def rank_cases(
    splits: Sequence[LeaveOneOutSplit],
    model: CGRecModel,
    vocab: HierVocab,
    rng: np.random.Generator,
    config: EvalConfig | None = None,
    stage: Stage = "test",
) -> list[RankedCase]:
    """Rank each user's held-out item among sampled negatives with the item-level score."""
    config = config or EvalConfig()
    pools = CandidatePools(vocab, config.domain_restricted)
    depth = vocab.depth
    m = model.config.max_len
    table = model.embeddings.table(depth)
    cases: list[RankedCase] = []
    deficit_cases = 0

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for start in range(0, len(splits), config.batch_size):
                chunk = splits[start : start + config.batch_size]
                histories = [s.test_input() if stage == "test" else s.valid_input() for s in chunk]
                targets = [s.test_target if stage == "test" else s.valid_target for s in chunk]
                batch = SequenceBatch.from_histories(histories, m, depth)
                z = model.encode(batch)[:, -1]
                context = model.level_context(z, depth)
                for b, (split, target) in enumerate(zip(chunk, targets)):
                    negs, deficit = pools.sample(target.domain_id, split.history_items(), config.num_negatives, rng)
                    cands = torch.as_tensor(np.concatenate([[target.item_id], negs]), dtype=torch.long)
                    scores = (table[cands] * context[b]).sum(dim=-1)
                    rank = 1 + int((scores[1:] >= scores[0]).sum())
                    deficit_cases += deficit > 0
                    cases.append(
                        RankedCase(
                            user_id=split.user_id,
                            domain_id=target.domain_id,
                            rank=rank,
                            num_candidates=len(cands),
                            deficit=deficit,
                        )
                    )
    finally:
        model.train(was_training)
    if deficit_cases:
        logger.warning("cases with fewer negatives than requested", extra={"cases": deficit_cases, "stage": stage})
    return cases


def rank_case(
    split: LeaveOneOutSplit,
    model: CGRecModel,
    vocab: HierVocab,
    rng: np.random.Generator,
    config: EvalConfig | None = None,
    stage: Stage = "test",
) -> RankedCase:
    return rank_cases([split], model, vocab, rng, config, stage)[0]


def evaluate(
    splits: Sequence[LeaveOneOutSplit],
    model: CGRecModel,
    vocab: HierVocab,
    seed: int,
    config: EvalConfig | None = None,
    stage: Stage = "test",
) -> tuple[EvalReport, list[RankedCase]]:
    rng = np.random.default_rng(seed)
    cases = rank_cases(splits, model, vocab, rng, config, stage)
    report = aggregate(cases, vocab.domain_names, seed)
    report.meta["stage"] = stage
    return report, cases


def write_report(report: EvalReport, directory: Path, cases: Sequence[RankedCase] | None = None) -> None:
    """metrics.tsv, summary.json and (optionally) cases.tsv."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    report.to_frame().to_csv(directory / "metrics.tsv", sep="\t", index=False, float_format="%.6f")
    (directory / "summary.json").write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    if cases is not None:
        pd.DataFrame([c.__dict__ for c in cases]).to_csv(directory / "cases.tsv", sep="\t", index=False)


def average_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Unweighted mean of several reports (one per seed) over the domains they share."""
    if not reports:
        raise EmptyDatasetError("no reports to average")
    domains = [d for d in reports[0].metrics if all(d in r.metrics for r in reports)]
    metrics = {d: {k: float(np.mean([r.metrics[d][k] for r in reports])) for k in METRIC_NAMES} for d in domains}
    overall = {k: float(np.mean([r.overall[k] for r in reports])) for k in METRIC_NAMES}
    return EvalReport(
        metrics=metrics,
        counts={d: reports[0].counts[d] for d in domains},
        overall=overall,
        deficits=sum(r.deficits for r in reports),
        meta={"seeds": [r.seed for r in reports]},
    )


def relative_gain_table(reports: Mapping[str, EvalReport], reference: str) -> pd.DataFrame:
    """Ratio of each variant's metric to the reference variant's, per domain and metric."""
    base = reports[reference]
    rows = []
    for variant, report in reports.items():
        for domain, values in report.metrics.items():
            for metric in METRIC_NAMES:
                ref = base.metrics.get(domain, {}).get(metric, 0.0)
                rows.append(
                    {
                        "variant": variant,
                        "domain": domain,
                        "metric": metric,
                        "value": values[metric],
                        "ratio": values[metric] / ref if ref > 0 else math.nan,
                    }
                )
    return pd.DataFrame(rows, columns=["variant", "domain", "metric", "value", "ratio"])
