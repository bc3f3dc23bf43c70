"""Cooperative game over domains and the domain weights it drives.

Players are domains. The value of a coalition is the mean log-sigmoid rank
margin of the model on the batch with every other domain masked to PAD, so a
larger value means a better fit. Exact Shapley values of that game update the
domain weight vector gamma once per mini-batch.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import torch

from .batching import SequenceBatch
from .errors import GameError
from .predictor import NegativeSample
from .sequence_store import PaddedSequence

logger = logging.getLogger(__name__)

MAX_PLAYERS = 20
MAX_PERMUTATION_PLAYERS = 8


@dataclass(frozen=True)
class Coalition:
    """A set of 1-based domain ids; bit d-1 of ``mask`` marks domain d."""

    members: frozenset[int]

    @classmethod
    def of(cls, *domains: int) -> Coalition:
        return cls(frozenset(domains))

    @classmethod
    def from_mask(cls, mask: int, num_players: int) -> Coalition:
        return cls(frozenset(d for d in range(1, num_players + 1) if mask >> (d - 1) & 1))

    @property
    def mask(self) -> int:
        return sum(1 << (d - 1) for d in self.members)

    def __contains__(self, domain: object) -> bool:
        return domain in self.members

    def __len__(self) -> int:
        return len(self.members)


def all_coalitions(num_players: int) -> list[Coalition]:
    """All 2^D coalitions, ordered by bitmask."""
    return [Coalition.from_mask(mask, num_players) for mask in range(1 << num_players)]


def mask_coalition(seq: PaddedSequence, coalition: Coalition) -> PaddedSequence:
    """PAD every slot whose domain is outside the coalition, keeping positions.

    A term at t survives when its target slot t+1 survives and some slot at or
    before t survives to supply the context.
    """
    survive = [tok is not None and tok.domain_id in coalition for tok in seq.tokens]
    tokens = tuple(tok if keep else None for tok, keep in zip(seq.tokens, survive))
    seen = list(itertools.accumulate(survive, lambda a, b: a or b))
    mask = tuple(
        seq.target_mask[t] and t + 1 < seq.m and survive[t + 1] and seen[t] for t in range(seq.m)
    )
    return PaddedSequence(tokens=tokens, target_mask=mask)


@dataclass
class CharTable:
    """Values of all 2^D coalitions, keyed by bitmask.

    Attributes:
        counts: loss terms that contributed to each value
        empty: coalitions with no surviving target (value pinned to 0)
    """

    num_players: int
    values: dict[int, float] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)
    empty: set[int] = field(default_factory=set)

    @classmethod
    def from_function(cls, num_players: int, fn: Callable[[Coalition], float]) -> CharTable:
        """Tabulate a game given as a function of the coalition; v(empty) is forced to 0."""
        table = cls(num_players)
        for c in all_coalitions(num_players):
            table.values[c.mask] = 0.0 if c.mask == 0 else float(fn(c))
        return table

    def value(self, coalition: Coalition) -> float:
        return self.values[coalition.mask]

    def as_array(self) -> np.ndarray:
        size = 1 << self.num_players
        missing = [m for m in range(size) if m not in self.values]
        if missing:
            raise GameError(f"characteristic table is missing {len(missing)} of {size} coalitions")
        return np.array([self.values[m] for m in range(size)], dtype=np.float64)


@contextmanager
def _forward_only(model: torch.nn.Module) -> Iterator[None]:
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            yield
    finally:
        model.train(was_training)


def char_value(
    batch: SequenceBatch,
    coalition: Coalition,
    model,
    negatives: NegativeSample,
    levels: Sequence[int],
    normalize: bool = True,
) -> tuple[float, int]:
    """Value of one coalition on a batch, and the number of terms behind it.

    With ``normalize`` the summed log-sigmoid margin is divided by the term
    count; otherwise by the number of batch rows, matching the training loss.
    """
    if not coalition.members:
        return 0.0, 0
    with _forward_only(model):
        terms = model.terms(batch.restrict(coalition.members), negatives, list(levels))
    n = terms.count()
    if n == 0:
        return 0.0, 0
    total = float(terms.values.double().sum())
    return -total / (n if normalize else batch.size), n


def char_table(
    batch: SequenceBatch,
    model,
    negatives: NegativeSample,
    num_players: int,
    levels: Sequence[int],
    normalize: bool = True,
) -> CharTable:
    """Evaluate every coalition once, reusing the same negatives throughout."""
    if not 1 <= num_players <= MAX_PLAYERS:
        raise GameError(f"number of domains must be in 1..{MAX_PLAYERS}, got {num_players}")
    table = CharTable(num_players)
    for c in all_coalitions(num_players):
        value, n = char_value(batch, c, model, negatives, levels, normalize)
        table.values[c.mask] = value
        table.counts[c.mask] = n
        if c.mask and n == 0:
            table.empty.add(c.mask)
    return table


def _popcount(masks: np.ndarray, num_players: int) -> np.ndarray:
    sizes = np.zeros_like(masks)
    for i in range(num_players):
        sizes += (masks >> i) & 1
    return sizes


def shapley_exact(table: CharTable, num_players: int | None = None) -> np.ndarray:
    """Exact Shapley values by subset enumeration.

    phi_i = sum over S not containing i of |S|!(D-|S|-1)!/D! * (v(S+i) - v(S))

    Raises:
        GameError: D outside 1..20 or a coalition missing from the table
    """
    d = table.num_players if num_players is None else num_players
    if not 1 <= d <= MAX_PLAYERS:
        raise GameError(f"exact Shapley values need 1..{MAX_PLAYERS} players, got {d}")
    if d != table.num_players:
        raise GameError(f"table has {table.num_players} players, asked for {d}")
    v = table.as_array()
    masks = np.arange(1 << d, dtype=np.int64)
    sizes = _popcount(masks, d)
    weights = np.array([1.0 / (d * math.comb(d - 1, s)) for s in range(d)])
    phi = np.zeros(d, dtype=np.float64)
    for i in range(d):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        phi[i] = float(np.sum(weights[sizes[without]] * (v[without | bit] - v[without])))
    return phi


def shapley_permutation(table: CharTable, num_players: int | None = None) -> np.ndarray:
    """Average marginal contribution over all D! join orders (small D only)."""
    d = table.num_players if num_players is None else num_players
    if not 1 <= d <= MAX_PERMUTATION_PLAYERS:
        raise GameError(f"permutation form supports 1..{MAX_PERMUTATION_PLAYERS} players, got {d}")
    v = table.as_array()
    phi = np.zeros(d, dtype=np.float64)
    for order in itertools.permutations(range(d)):
        mask = 0
        for i in order:
            phi[i] += v[mask | (1 << i)] - v[mask]
            mask |= 1 << i
    return phi / math.factorial(d)


# ---------------------------------------------------------------------------
# Domain weights
# ---------------------------------------------------------------------------


def softmax_temperature(x: np.ndarray, temperature: float) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass(frozen=True)
class GammaState:
    """Negative-transfer weights.

    ``raw`` is the pre-normalization vector the next update starts from;
    ``weights`` is softmax(raw; temperature) and is what scales the loss.
    """

    raw: np.ndarray
    weights: np.ndarray
    alpha: float
    beta: float
    temperature: float
    step: int = 0
    phi: np.ndarray | None = None

    @classmethod
    def uniform(cls, num_domains: int, alpha: float, beta: float, temperature: float) -> GammaState:
        if temperature <= 0:
            raise GameError(f"temperature must be positive, got {temperature}")
        u = np.full(num_domains, 1.0 / num_domains)
        return cls(raw=u.copy(), weights=u.copy(), alpha=alpha, beta=beta, temperature=temperature)

    @property
    def num_domains(self) -> int:
        return len(self.weights)

    def as_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.weights, dtype=dtype)

    def to_dict(self) -> dict:
        return {
            "raw": self.raw.tolist(),
            "weights": self.weights.tolist(),
            "alpha": self.alpha,
            "beta": self.beta,
            "temperature": self.temperature,
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, data: dict) -> GammaState:
        return cls(
            raw=np.asarray(data["raw"], dtype=np.float64),
            weights=np.asarray(data["weights"], dtype=np.float64),
            alpha=data["alpha"],
            beta=data["beta"],
            temperature=data["temperature"],
            step=data.get("step", 0),
        )


def update_gamma(state: GammaState, phi: np.ndarray) -> GammaState:
    """raw <- alpha * raw + beta * phi, then weights <- softmax(raw; temperature).

    Raises:
        GameError: phi has the wrong length or non-finite entries
    """
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (state.num_domains,):
        raise GameError(f"expected {state.num_domains} Shapley values, got shape {phi.shape}")
    if not np.all(np.isfinite(phi)):
        raise GameError(f"non-finite Shapley values: {phi.tolist()}")
    raw = state.alpha * state.raw + state.beta * phi
    return replace(state, raw=raw, weights=softmax_temperature(raw, state.temperature), step=state.step + 1, phi=phi)


def negative_transfer_report(history: Sequence[GammaState]) -> pd.DataFrame:
    """One row per recorded state: step and the normalized weight of each domain."""
    if not history:
        return pd.DataFrame(columns=["step"])
    d = history[0].num_domains
    rows = [{"step": s.step, **{f"gamma_{i + 1}": float(w) for i, w in enumerate(s.weights)}} for s in history]
    return pd.DataFrame(rows, columns=["step", *[f"gamma_{i}" for i in range(1, d + 1)]])
