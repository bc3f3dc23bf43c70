"""Coarse-to-fine prediction heads and the hierarchical pairwise rank loss."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .batching import SequenceBatch
from .errors import EmptyBatchError, EncodingError
from .sequence_store import PAD, HierVocab

logger = logging.getLogger(__name__)


class LevelHead(nn.Module):
    """FFN^h(z) = GELU(z W3 + b3) W4 + b4."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.w3 = nn.Linear(dim, dim)
        self.w4 = nn.Linear(dim, dim)
        self.act = nn.GELU()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.w4(self.act(self.w3(z)))


class HierarchicalHeads(nn.Module):
    """One unshared head per level; level h >= 2 adds the head of level h-1."""

    def __init__(self, depth: int, dim: int) -> None:
        super().__init__()
        self.heads = nn.ModuleList(LevelHead(dim) for _ in range(depth))

    @property
    def depth(self) -> int:
        return len(self.heads)

    def forward(self, z: torch.Tensor, h: int) -> torch.Tensor:
        return level_context(z, self, h)


def level_context(z: torch.Tensor, heads: HierarchicalHeads, h: int) -> torch.Tensor:
    """Context vector for level ``h`` (1-based): FFN^h(z), plus FFN^{h-1}(z) when h >= 2."""
    if not 1 <= h <= heads.depth:
        raise ValueError(f"level {h} outside 1..{heads.depth}")
    out = heads.heads[h - 1](z)
    if h >= 2:
        out = out + heads.heads[h - 2](z)
    return out


def _dot(context: torch.Tensor, table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    return (table[ids] * context).sum(dim=-1)


def score(context: torch.Tensor, ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Dot product of each candidate's level embedding with the context.

    ``context`` (..., r) broadcasts against ``ids`` (...,) after the id lookup.

    Raises:
        EncodingError: a candidate is PAD or outside the table
    """
    if ids.numel() and (int(ids.min()) <= PAD or int(ids.max()) >= table.shape[0]):
        raise EncodingError(f"candidate ids must lie in [1, {table.shape[0] - 1}]")
    return _dot(context, table, ids)


# ---------------------------------------------------------------------------
# Negative sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LevelRanges:
    """(D+1, H) tensors: first id and size of each (domain, level) range; row 0 is PAD."""

    lo: torch.Tensor
    size: torch.Tensor

    @classmethod
    def from_vocab(cls, vocab: HierVocab) -> LevelRanges:
        lo = torch.zeros((vocab.num_domains + 1, vocab.depth), dtype=torch.long)
        size = torch.zeros_like(lo)
        for (d, h), (a, b) in vocab.ranges.items():
            lo[d, h - 1] = a
            size[d, h - 1] = b - a + 1
        return cls(lo=lo, size=size)


@dataclass(frozen=True)
class NegativeSample:
    """(B, m, H) negative ids aligned with the batch targets; 0 where no term exists.

    Attributes:
        skipped: terms dropped because their (domain, level) range has one id
    """

    ids: torch.Tensor
    skipped: int


def sample_negatives(batch: SequenceBatch, ranges: LevelRanges, generator: torch.Generator) -> NegativeSample:
    """One uniform negative per target and level, from the target's own domain and level.

    Draws are made for every (row, position, level) so the stream consumed
    from ``generator`` depends only on the batch shape.
    """
    targets = batch.target_ids()
    tdom = batch.target_domains()
    lo = ranges.lo.to(targets.device)[tdom]  # (B, m, H)
    size = ranges.size.to(targets.device)[tdom]
    u = torch.rand(targets.shape, generator=generator, dtype=torch.float64)
    offset = torch.floor(u.to(targets.device) * (size - 1).clamp(min=0)).long()
    neg = lo + offset
    neg = neg + (neg >= targets).long()
    active = batch.target_mask.unsqueeze(-1).expand_as(targets)
    usable = active & (size >= 2)
    skipped = int((active & (size < 2)).sum())
    if skipped:
        logger.debug("skipped singleton-range terms", extra={"skipped": skipped})
    return NegativeSample(ids=torch.where(usable, neg, torch.zeros_like(neg)), skipped=skipped)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


@dataclass
class LossTerms:
    """Per-(row, position, level) terms -log sigma(pos - neg) with their target domains.

    ``values`` is zero wherever ``valid`` is false.
    """

    values: torch.Tensor
    valid: torch.Tensor
    domains: torch.Tensor
    batch_size: int

    def total(self) -> torch.Tensor:
        """Sum of terms averaged over batch rows."""
        return self.values.sum() / self.batch_size

    def count(self) -> int:
        return int(self.valid.sum())

    def weighted(self, weights: torch.Tensor) -> torch.Tensor:
        """Sum of terms scaled by the weight of each term's target domain, averaged over rows.

        ``weights`` holds one entry per domain, domain 1 first.
        """
        w = torch.cat([weights.new_zeros(1), weights]).to(self.values.dtype)
        return (self.values * w[self.domains].unsqueeze(-1)).sum() / self.batch_size

    def per_domain(self, num_domains: int) -> dict[int, float]:
        per_pos = self.values.detach().sum(dim=-1)
        return {d: float(per_pos[self.domains == d].sum()) / self.batch_size for d in range(1, num_domains + 1)}


def hcross_terms(
    z: torch.Tensor,
    batch: SequenceBatch,
    negatives: NegativeSample,
    heads: HierarchicalHeads,
    tables: Sequence[torch.Tensor],
    levels: Sequence[int],
) -> LossTerms:
    """Rank terms for the requested levels from encoder outputs ``z`` (B, m, r).

    The context of position t is the latest real slot at or before t.
    """
    idx, has_ctx = batch.context_index()
    ctx = torch.gather(z, 1, idx.unsqueeze(-1).expand_as(z))
    targets = batch.target_ids()
    base = batch.target_mask & has_ctx

    wanted = set(levels)
    values: list[torch.Tensor] = []
    valid: list[torch.Tensor] = []
    for h in range(1, batch.depth + 1):
        if h not in wanted:
            values.append(torch.zeros(base.shape, dtype=z.dtype, device=z.device))
            valid.append(torch.zeros_like(base))
            continue
        u = level_context(ctx, heads, h)
        table = tables[h - 1]
        neg = negatives.ids[..., h - 1]
        ok = base & (neg > PAD) & (targets[..., h - 1] > PAD)
        margin = _dot(u, table, targets[..., h - 1]) - _dot(u, table, neg)
        values.append(torch.where(ok, -F.logsigmoid(margin), torch.zeros_like(margin)))
        valid.append(ok)
    domains = torch.where(base, batch.target_domains(), torch.zeros_like(batch.domains))
    return LossTerms(
        values=torch.stack(values, dim=-1),
        valid=torch.stack(valid, dim=-1),
        domains=domains,
        batch_size=batch.size,
    )


def hcross_loss(
    z: torch.Tensor,
    batch: SequenceBatch,
    negatives: NegativeSample,
    heads: HierarchicalHeads,
    tables: Sequence[torch.Tensor],
    levels: Sequence[int],
) -> tuple[torch.Tensor, LossTerms]:
    """Minimized hierarchical rank loss and its per-term breakdown.

    Raises:
        EmptyBatchError: no valid term in the batch
    """
    terms = hcross_terms(z, batch, negatives, heads, tables, levels)
    if not terms.count():
        raise EmptyBatchError("batch has no valid target positions")
    return terms.total(), terms
