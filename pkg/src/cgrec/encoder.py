"""Causal self-attention encoder over summed level embeddings.

Row t of the input is the sum of the level embeddings of slot t plus the
position embedding; PAD slots are all-zero rows, never act as keys, and are
zeroed again after every block.
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import torch
from torch import nn

from .errors import EncodingError
from .sequence_store import PaddedSequence

INIT_STD = 0.02


def init_weights(module: nn.Module) -> None:
    """Truncated-normal (std 0.02) weights, zero biases."""
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.trunc_normal_(module.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        if module.padding_idx is not None:
            with torch.no_grad():
                module.weight[module.padding_idx].zero_()


class LevelEmbeddings(nn.Module):
    """One table per category level (B^h) plus the position table P.

    Args:
        table_sizes: rows per level table, PAD row 0 included
        max_len: sequence length m
        dim: embedding size r
        input_levels: 1-based levels summed into the encoder input
    """

    def __init__(self, table_sizes: Sequence[int], max_len: int, dim: int, input_levels: Sequence[int]) -> None:
        super().__init__()
        self.levels = nn.ModuleList(nn.Embedding(n, dim, padding_idx=0) for n in table_sizes)
        self.position = nn.Embedding(max_len, dim)
        self.input_levels = tuple(input_levels)
        if not self.input_levels or not all(1 <= h <= len(table_sizes) for h in self.input_levels):
            raise ValueError(f"input levels {self.input_levels} out of range 1..{len(table_sizes)}")

    @property
    def depth(self) -> int:
        return len(self.levels)

    def table(self, h: int) -> torch.Tensor:
        return self.levels[h - 1].weight

    def pin_padding(self) -> None:
        with torch.no_grad():
            for emb in self.levels:
                emb.weight[0].zero_()

    def check_ids(self, ids: torch.Tensor) -> None:
        if ids.shape[-1] != self.depth:
            raise EncodingError(f"expected {self.depth} levels, got {ids.shape[-1]}")
        for h, emb in enumerate(self.levels):
            level = ids[..., h]
            if level.numel() and (int(level.min()) < 0 or int(level.max()) >= emb.num_embeddings):
                raise EncodingError(f"level {h + 1} id outside [0, {emb.num_embeddings - 1}]")

    def forward(self, ids: torch.Tensor, nonpad: torch.Tensor) -> torch.Tensor:
        """(B, m, H) ids -> (B, m, r); PAD rows are exactly zero."""
        self.check_ids(ids)
        m = ids.shape[1]
        if m > self.position.num_embeddings:
            raise EncodingError(f"sequence length {m} exceeds position table {self.position.num_embeddings}")
        out = self.position.weight[:m].unsqueeze(0)
        for h in self.input_levels:
            out = out + self.levels[h - 1](ids[..., h - 1])
        return out * nonpad.unsqueeze(-1).to(out.dtype)


def causal_mask(nonpad: torch.Tensor) -> torch.Tensor:
    """(B, m) -> (B, 1, m, m): query i may read key j iff j <= i and j is not PAD."""
    m = nonpad.shape[-1]
    lower = torch.ones((m, m), dtype=torch.bool, device=nonpad.device).tril()
    return (lower.unsqueeze(0) & nonpad.unsqueeze(1)).unsqueeze(1)


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    allowed: torch.Tensor,
    dropout: nn.Module | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """softmax(QK^T / sqrt(d_k)) V over permitted keys.

    Rows with no permitted key return zero.

    Returns:
        (output, attention weights)
    """
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    logits = logits.masked_fill(~allowed, float("-inf"))
    live = allowed.any(dim=-1, keepdim=True)
    logits = logits.masked_fill(~live, 0.0)
    weights = torch.softmax(logits, dim=-1).masked_fill(~allowed, 0.0)
    if dropout is not None:
        weights = dropout(weights)
    return weights @ v, weights


class MultiHeadSelfAttention(nn.Module):
    """p heads of width r/p, concatenated and projected by W^F."""

    def __init__(self, dim: int, num_heads: int, dropout: float = 0.0) -> None:
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_size = dim // num_heads
        self.q_w = nn.Linear(dim, dim, bias=False)
        self.k_w = nn.Linear(dim, dim, bias=False)
        self.v_w = nn.Linear(dim, dim, bias=False)
        self.out_w = nn.Linear(dim, dim, bias=False)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, m, _ = x.shape
        return x.view(b, m, self.num_heads, self.head_size).transpose(1, 2)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        b, m, _ = x.shape
        q, k, v = self._split(self.q_w(x)), self._split(self.k_w(x)), self._split(self.v_w(x))
        heads, _ = attention(q, k, v, allowed, self.dropout)
        merged = heads.transpose(1, 2).contiguous().view(b, m, self.dim)
        return self.out_w(merged)


class PointWiseFeedForward(nn.Module):
    """GELU(x W1 + b1) W2 + b2, applied position-wise (exact-erf GELU)."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.w1 = nn.Linear(dim, dim)
        self.w2 = nn.Linear(dim, dim)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w2(self.act(self.w1(x)))


class EncoderBlock(nn.Module):
    """Pre-norm residual block: attention sublayer then feed-forward sublayer."""

    def __init__(self, dim: int, num_heads: int, dropout: float) -> None:
        super().__init__()
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, num_heads, dropout)
        self.ffn_norm = nn.LayerNorm(dim)
        self.ffn = PointWiseFeedForward(dim)
        self.dropout = nn.Dropout(dropout)

    def mha_layer(self, z: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        return z + self.dropout(self.attn(self.attn_norm(z), allowed))

    def forward(self, z: torch.Tensor, allowed: torch.Tensor, nonpad: torch.Tensor) -> torch.Tensor:
        z = self.mha_layer(z, allowed)
        z = z + self.dropout(self.ffn(self.ffn_norm(z)))
        return z * nonpad.unsqueeze(-1).to(z.dtype)


class SelfAttentionEncoder(nn.Module):
    """L stacked blocks; with L = 0 the input passes through unchanged."""

    def __init__(self, dim: int, num_heads: int, num_layers: int, dropout: float) -> None:
        super().__init__()
        self.blocks = nn.ModuleList(EncoderBlock(dim, num_heads, dropout) for _ in range(num_layers))
        self.final_norm = nn.LayerNorm(dim) if num_layers else None
        self.dropout = nn.Dropout(dropout)

    def forward(self, e: torch.Tensor, nonpad: torch.Tensor) -> torch.Tensor:
        if not self.blocks:
            return e
        allowed = causal_mask(nonpad)
        z = self.dropout(e)
        for block in self.blocks:
            z = block(z, allowed, nonpad)
        return self.final_norm(z) * nonpad.unsqueeze(-1).to(z.dtype)


def padded_to_tensors(seq: PaddedSequence, depth: int) -> tuple[torch.Tensor, torch.Tensor]:
    """(1, m, H) ids and (1, m) non-PAD mask for a single padded sequence."""
    ids = torch.zeros((1, seq.m, depth), dtype=torch.long)
    for t, tok in enumerate(seq.tokens):
        if tok is not None:
            ids[0, t] = torch.tensor(tok.category_ids, dtype=torch.long)
    nonpad = torch.tensor([[tok is not None for tok in seq.tokens]])
    return ids, nonpad


def embed_sequence(seq: PaddedSequence, emb: LevelEmbeddings) -> torch.Tensor:
    """(m, r) input representation of one padded sequence."""
    ids, nonpad = padded_to_tensors(seq, emb.depth)
    return emb(ids, nonpad)[0]
