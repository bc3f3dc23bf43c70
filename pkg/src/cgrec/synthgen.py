"""Synthetic multi-domain sequences with controllable cross-domain transfer.

Each user gets one latent vector per domain; the vectors are jointly Gaussian
with correlation ``cross_corr`` on every latent coordinate. Items of a domain
are embedded hierarchically (coarse-category centre plus finer offsets), and a
user picks items by a softmax over latent . embedding. Noise domains ignore
the user and draw uniformly. Domain order follows independent Poisson
arrival processes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DomainProfile, SynthProfile
from .errors import ProfileError
from .sequence_store import (
    DomainHybridSequence,
    HierarchyManifest,
    HierVocab,
    Interaction,
    build_vocab,
    write_events,
    write_manifest,
)

logger = logging.getLogger(__name__)

BASE_TIMESTAMP = 1_600_000_000
SECONDS_PER_UNIT = 3600


@dataclass
class SyntheticDataset:
    sequences: list[DomainHybridSequence]
    manifest: HierarchyManifest
    vocab: HierVocab


def correlation_matrix(profile: SynthProfile) -> np.ndarray:
    """Validated cross-domain correlation matrix.

    Raises:
        ProfileError: not symmetric, diagonal not one, entries outside [-1, 1],
            not positive semidefinite, or noise domains out of range
    """
    d = profile.num_domains
    corr = np.eye(d) if profile.cross_corr is None else np.asarray(profile.cross_corr, dtype=np.float64)
    if not np.allclose(corr, corr.T, atol=1e-12):
        raise ProfileError("cross_corr is not symmetric")
    if not np.allclose(np.diag(corr), 1.0, atol=1e-12):
        raise ProfileError("cross_corr must have a unit diagonal")
    if np.any(np.abs(corr) > 1.0 + 1e-12):
        raise ProfileError("cross_corr entries must lie in [-1, 1]")
    if np.linalg.eigvalsh(corr).min() < -1e-10:
        raise ProfileError("cross_corr is not positive semidefinite")
    bad = [n for n in profile.noise_domains if not 1 <= n <= d]
    if bad:
        raise ProfileError(f"noise domains {bad} outside 1..{d}")
    return corr


def _coarse_sizes(dom: DomainProfile) -> list[int]:
    # each level refines the previous one, so sizes stay multiples of each other
    sizes, size = [], 1
    for _ in range(1, dom.depth):
        if size * dom.branching <= dom.num_items:
            size *= dom.branching
        sizes.append(size)
    return sizes


def _item_paths(dom: DomainProfile) -> list[tuple[str, ...]]:
    sizes = _coarse_sizes(dom)
    paths = []
    for i in range(dom.num_items):
        coarse = tuple(f"{dom.name}-l{h + 1}-c{i * n // dom.num_items}" for h, n in enumerate(sizes))
        paths.append(coarse + (f"{dom.name}-i{i}",))
    return paths


def _tree(paths: list[tuple[str, ...]], depth: int) -> dict | list:
    if depth == 1:
        return [p[0] for p in paths]
    tree: dict = {}
    for p in paths:
        node = tree
        for label in p[:-2]:
            node = node.setdefault(label, {})
        node.setdefault(p[-2], []).append(p[-1])
    return tree


def build_manifest(profile: SynthProfile) -> HierarchyManifest:
    return HierarchyManifest.model_validate(
        {
            "domains": [
                {"name": dom.name, "depth": dom.depth, "tree": _tree(_item_paths(dom), dom.depth)}
                for dom in profile.domains
            ]
        }
    )


def _item_embeddings(dom: DomainProfile, dim: int, within: float, rng: np.random.Generator) -> np.ndarray:
    """Items sum one random centre per coarse level (shrinking scale) plus their own offset."""
    n = dom.num_items
    emb = np.zeros((n, dim))
    idx = np.arange(n)
    for h, size in enumerate(_coarse_sizes(dom)):
        centres = rng.standard_normal((size, dim)) * (0.6**h)
        emb += centres[idx * size // n]
    emb += rng.standard_normal((n, dim)) * (within if dom.depth > 1 else 1.0)
    return emb


def generate(profile: SynthProfile) -> SyntheticDataset:
    """Generate sequences and their manifest; identical output for identical profiles."""
    corr = correlation_matrix(profile)
    manifest = build_manifest(profile)
    vocab = build_vocab((), manifest)
    d = profile.num_domains
    k = profile.latent_dim

    evals, evecs = np.linalg.eigh(corr)
    mixing = evecs @ np.diag(np.sqrt(np.clip(evals, 0.0, None)))

    world, *user_seeds = np.random.SeedSequence(profile.seed).spawn(profile.num_users + 1)
    world_rng = np.random.default_rng(world)
    embeddings = [_item_embeddings(dom, k, profile.within_scale, world_rng) for dom in profile.domains]
    encoded = [
        [vocab.encode_path(di, path) for path in _item_paths(dom)] for di, dom in enumerate(profile.domains, start=1)
    ]
    rates = np.array([dom.arrival_rate for dom in profile.domains])
    domain_p = rates / rates.sum()
    noise = set(profile.noise_domains)

    sequences: list[DomainHybridSequence] = []
    for u, seed in enumerate(user_seeds):
        rng = np.random.default_rng(seed)
        latent = mixing @ rng.standard_normal((d, k))  # row j is domain j+1
        probs = []
        for j, emb in enumerate(embeddings):
            if j + 1 in noise:
                probs.append(None)
                continue
            logits = profile.sharpness * emb @ latent[j] / np.sqrt(k)
            p = np.exp(logits - logits.max())
            probs.append(p / p.sum())

        length = int(rng.integers(profile.min_len, profile.max_len + 1))
        gaps = rng.exponential(1.0 / rates.sum(), size=length)
        clock = BASE_TIMESTAMP + np.floor(np.cumsum(gaps) * SECONDS_PER_UNIT).astype(np.int64)
        domains = rng.choice(d, size=length, p=domain_p)
        items = []
        for t in range(length):
            j = int(domains[t])
            n_items = profile.domains[j].num_items
            i = int(rng.integers(n_items)) if probs[j] is None else int(rng.choice(n_items, p=probs[j]))
            items.append(Interaction(domain_id=j + 1, category_ids=encoded[j][i], timestamp=int(clock[t])))
        sequences.append(DomainHybridSequence(user_id=f"u{u:06d}", items=items))

    logger.info(
        "generated synthetic dataset",
        extra={"users": len(sequences), "domains": d, "seed": profile.seed, "noise_domains": sorted(noise)},
    )
    return SyntheticDataset(sequences=sequences, manifest=manifest, vocab=vocab)


def write_dataset(dataset: SyntheticDataset, events: Path, manifest: Path) -> int:
    write_manifest(dataset.manifest, manifest)
    return write_events(dataset.sequences, dataset.vocab, events)
