"""The recommender: level embeddings, causal encoder and hierarchical heads."""

from __future__ import annotations

import logging
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch
from torch import nn

from .batching import SequenceBatch
from .config import TrainConfig, config_hash
from .encoder import LevelEmbeddings, SelfAttentionEncoder, init_weights, padded_to_tensors
from .errors import ArtifactError
from .predictor import HierarchicalHeads, LossTerms, NegativeSample, hcross_loss, hcross_terms, level_context
from .sequence_store import HierVocab, PaddedSequence

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cgrec-checkpoint/1"


class CGRecModel(nn.Module):
    """Self-attention next-item model over domain-hybrid sequences."""

    def __init__(self, table_sizes: list[int], config: TrainConfig) -> None:
        super().__init__()
        depth = len(table_sizes)
        input_levels = list(range(1, depth + 1)) if config.embeds_categories else [depth]
        self.config = config
        self.embeddings = LevelEmbeddings(table_sizes, config.max_len, config.dim, input_levels)
        self.encoder = SelfAttentionEncoder(config.dim, config.num_heads, config.num_layers, config.dropout)
        self.heads = HierarchicalHeads(depth, config.dim)
        self.apply(init_weights)

    @property
    def depth(self) -> int:
        return self.embeddings.depth

    def tables(self) -> list[torch.Tensor]:
        return [self.embeddings.table(h) for h in range(1, self.depth + 1)]

    def encode(self, batch: SequenceBatch) -> torch.Tensor:
        """(B, m, r) encoder outputs; row t depends only on slots <= t."""
        nonpad = batch.nonpad
        return self.encoder(self.embeddings(batch.ids, nonpad), nonpad)

    def encode_sequence(self, seq: PaddedSequence) -> torch.Tensor:
        ids, nonpad = padded_to_tensors(seq, self.depth)
        return self.encoder(self.embeddings(ids, nonpad), nonpad)[0]

    def level_context(self, z: torch.Tensor, h: int) -> torch.Tensor:
        return level_context(z, self.heads, h)

    def terms(self, batch: SequenceBatch, negatives: NegativeSample, levels: list[int]) -> LossTerms:
        return hcross_terms(self.encode(batch), batch, negatives, self.heads, self.tables(), levels)

    def loss(
        self, batch: SequenceBatch, negatives: NegativeSample, levels: list[int]
    ) -> tuple[torch.Tensor, LossTerms]:
        return hcross_loss(self.encode(batch), batch, negatives, self.heads, self.tables(), levels)

    def pin_padding(self) -> None:
        self.embeddings.pin_padding()


def build_model(vocab: HierVocab, config: TrainConfig) -> CGRecModel:
    sizes = [vocab.table_size(h) for h in range(1, vocab.depth + 1)]
    return CGRecModel(sizes, config)


def levels_for(config: TrainConfig, depth: int) -> list[int]:
    """Levels that carry loss terms for the configured variant."""
    return list(range(1, depth + 1)) if config.variant.hierarchical else [depth]


@dataclass
class Checkpoint:
    model: CGRecModel
    config: TrainConfig
    vocab_hash: str
    gamma: dict[str, Any] | None
    extra: dict[str, Any]


def save_checkpoint(
    path: Path,
    model: CGRecModel,
    vocab: HierVocab,
    gamma: dict[str, Any] | None = None,
    extra: dict[str, Any] | None = None,
) -> None:
    """Write a self-describing checkpoint: weights, config, vocabulary and config hashes."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.model_dump(mode="json"),
        "config_hash": config_hash(model.config),
        "vocab_hash": vocab.fingerprint(),
        "table_sizes": [vocab.table_size(h) for h in range(1, vocab.depth + 1)],
        "state_dict": model.state_dict(),
        "gamma": gamma,
        "extra": extra or {},
    }
    torch.save(payload, path)
    logger.info("saved checkpoint", extra={"path": str(path)})


def load_checkpoint(path: Path, vocab: HierVocab | None = None) -> Checkpoint:
    """Rebuild the model stored at ``path``.

    Raises:
        ArtifactError: unreadable file, unknown format, or vocabulary mismatch
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
        raise ArtifactError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ArtifactError(f"{path}: not a cgrec checkpoint")
    if vocab is not None and vocab.fingerprint() != payload["vocab_hash"]:
        raise ArtifactError(f"{path}: checkpoint was trained on a different vocabulary")
    config = TrainConfig.model_validate(payload["config"])
    model = CGRecModel(payload["table_sizes"], config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return Checkpoint(
        model=model,
        config=config,
        vocab_hash=payload["vocab_hash"],
        gamma=payload.get("gamma"),
        extra=payload.get("extra", {}),
    )
