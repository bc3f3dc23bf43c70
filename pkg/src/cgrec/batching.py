"""Tensor view of a batch of padded sequences."""

from __future__ import annotations

from collections.abc import Collection, Sequence
from dataclasses import dataclass, replace

import torch

from .sequence_store import PAD, Interaction, PaddedSequence, pad_truncate


@dataclass(frozen=True)
class SequenceBatch:
    """B padded sequences as tensors.

    Attributes:
        ids: (B, m, H) category ids per slot and level, PAD = 0
        domains: (B, m) domain id per slot, PAD = 0
        target_mask: (B, m) position t carries a term whose target is slot t+1
        user_ids: optional user id per row
    """

    ids: torch.Tensor
    domains: torch.Tensor
    target_mask: torch.Tensor
    user_ids: tuple[str, ...] = ()

    @classmethod
    def from_padded(
        cls, seqs: Sequence[PaddedSequence], depth: int, user_ids: Sequence[str] = ()
    ) -> SequenceBatch:
        if not seqs:
            raise ValueError("empty batch")
        m = seqs[0].m
        ids = torch.zeros((len(seqs), m, depth), dtype=torch.long)
        domains = torch.zeros((len(seqs), m), dtype=torch.long)
        mask = torch.zeros((len(seqs), m), dtype=torch.bool)
        for b, seq in enumerate(seqs):
            if seq.m != m:
                raise ValueError(f"row {b} has {seq.m} slots, expected {m}")
            for t, tok in enumerate(seq.tokens):
                if tok is None:
                    continue
                if len(tok.category_ids) != depth:
                    raise ValueError(f"row {b} slot {t}: {len(tok.category_ids)} levels, expected {depth}")
                ids[b, t] = torch.tensor(tok.category_ids, dtype=torch.long)
                domains[b, t] = tok.domain_id
            mask[b] = torch.tensor(seq.target_mask, dtype=torch.bool)
        return cls(ids=ids, domains=domains, target_mask=mask, user_ids=tuple(user_ids))

    @classmethod
    def from_histories(
        cls, histories: Sequence[Sequence[Interaction]], m: int, depth: int, user_ids: Sequence[str] = ()
    ) -> SequenceBatch:
        return cls.from_padded([pad_truncate(h, m) for h in histories], depth, user_ids)

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def max_len(self) -> int:
        return self.ids.shape[1]

    @property
    def depth(self) -> int:
        return self.ids.shape[2]

    @property
    def nonpad(self) -> torch.Tensor:
        return self.domains != PAD

    def target_ids(self) -> torch.Tensor:
        """(B, m, H): ids of slot t+1 at position t; the last position is PAD."""
        return torch.cat([self.ids[:, 1:], torch.zeros_like(self.ids[:, :1])], dim=1)

    def target_domains(self) -> torch.Tensor:
        return torch.cat([self.domains[:, 1:], torch.zeros_like(self.domains[:, :1])], dim=1)

    def context_index(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Latest real slot at or before each position, and whether one exists."""
        m = self.max_len
        pos = torch.arange(m, device=self.domains.device).expand_as(self.domains)
        marked = torch.where(self.nonpad, pos, torch.full_like(pos, -1))
        latest = torch.cummax(marked, dim=1).values
        return latest.clamp(min=0), latest >= 0

    def restrict(self, keep: Collection[int]) -> SequenceBatch:
        """Replace slots of domains outside ``keep`` with PAD, positions unchanged.

        A term survives when its target slot survives and some earlier-or-equal
        slot survives to provide context.
        """
        keep_t = torch.tensor(sorted(keep), dtype=torch.long, device=self.domains.device)
        survive = torch.isin(self.domains, keep_t) & self.nonpad
        ids = self.ids * survive.unsqueeze(-1)
        domains = self.domains * survive
        masked = replace(self, ids=ids, domains=domains)
        _, has_ctx = masked.context_index()
        target_survives = torch.cat([survive[:, 1:], torch.zeros_like(survive[:, :1])], dim=1)
        return replace(masked, target_mask=self.target_mask & target_survives & has_ctx)

    def select(self, index: torch.Tensor) -> SequenceBatch:
        rows = index.tolist()
        return SequenceBatch(
            ids=self.ids[index],
            domains=self.domains[index],
            target_mask=self.target_mask[index],
            user_ids=tuple(self.user_ids[i] for i in rows) if self.user_ids else (),
        )

    def to(self, device: torch.device | str) -> SequenceBatch:
        return replace(
            self,
            ids=self.ids.to(device),
            domains=self.domains.to(device),
            target_mask=self.target_mask.to(device),
        )
