"""Shared fixtures: small manifests, random batches and a double-precision model."""

from __future__ import annotations

import logging

import pytest
import torch
from hypothesis import HealthCheck, settings

from cgrec.batching import SequenceBatch
from cgrec.config import TrainConfig, Variant
from cgrec.model import CGRecModel, build_model
from cgrec.sequence_store import (
    DomainHybridSequence,
    HierarchyManifest,
    HierVocab,
    Interaction,
    build_vocab,
    pad_truncate,
)

settings.register_profile("ci", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("fast", max_examples=10, deadline=None)
settings.load_profile("ci")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow behavioral experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def restore_root_logger():
    """Commands reconfigure the root logger; put pytest's handlers back afterwards."""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for h in list(root.handlers):
        root.removeHandler(h)
    for h in handlers:
        root.addHandler(h)
    root.setLevel(level)


# books and movies are two-level, music is flat and gets padded to depth 2
THREE_DOMAINS = {
    "domains": [
        {"name": "books", "depth": 2, "tree": {"fiction": ["b1", "b2", "b3"], "science": ["b4", "b5"]}},
        {"name": "movies", "depth": 2, "tree": {"drama": ["m1", "m2"], "comedy": ["m3", "m4"]}},
        {"name": "music", "depth": 1, "tree": ["s1", "s2", "s3"]},
    ]
}

TWO_DOMAINS = {
    "domains": [
        {"name": "a", "depth": 2, "tree": {"a1": ["x1", "x2"], "a2": ["x3"]}},
        {"name": "b", "depth": 2, "tree": {"b1": ["y1", "y2"], "b2": ["y3", "y4"]}},
    ]
}


@pytest.fixture
def manifest() -> HierarchyManifest:
    return HierarchyManifest.model_validate(THREE_DOMAINS)


@pytest.fixture
def vocab(manifest) -> HierVocab:
    return build_vocab((), manifest)


@pytest.fixture
def two_domain_manifest() -> HierarchyManifest:
    return HierarchyManifest.model_validate(TWO_DOMAINS)


@pytest.fixture
def two_domain_vocab(two_domain_manifest) -> HierVocab:
    return build_vocab((), two_domain_manifest)


def catalogue(manifest: HierarchyManifest, vocab: HierVocab) -> list[tuple[int, tuple[int, ...]]]:
    """(domain id, category ids) of every declared item."""
    return [
        (d, vocab.encode_path(d, path))
        for d, spec in enumerate(manifest.domains, start=1)
        for path in spec.item_paths()
    ]


def random_sequences(
    manifest: HierarchyManifest,
    vocab: HierVocab,
    n: int,
    generator: torch.Generator,
    min_len: int = 2,
    max_len: int = 6,
    domains: set[int] | None = None,
) -> list[DomainHybridSequence]:
    items = [x for x in catalogue(manifest, vocab) if domains is None or x[0] in domains]
    out = []
    for u in range(n):
        length = int(torch.randint(min_len, max_len + 1, (1,), generator=generator))
        picks = torch.randint(len(items), (length,), generator=generator).tolist()
        seq = [Interaction(domain_id=items[i][0], category_ids=items[i][1], timestamp=t) for t, i in enumerate(picks)]
        out.append(DomainHybridSequence(user_id=f"u{u}", items=seq))
    return out


def random_batch(
    manifest: HierarchyManifest,
    vocab: HierVocab,
    size: int,
    m: int,
    generator: torch.Generator,
    domains: set[int] | None = None,
) -> SequenceBatch:
    seqs = random_sequences(manifest, vocab, size, generator, 2, m + 2, domains)
    return SequenceBatch.from_padded([pad_truncate(s, m) for s in seqs], vocab.depth, [s.user_id for s in seqs])


def tiny_config(**overrides) -> TrainConfig:
    base = dict(
        max_len=4,
        dim=4,
        num_layers=1,
        num_heads=1,
        dropout=0.0,
        batch_size=8,
        epochs=1,
        variant=Variant.FULL,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def tiny_model(two_domain_vocab) -> CGRecModel:
    torch.manual_seed(0)
    model = build_model(two_domain_vocab, tiny_config()).double()
    model.eval()
    return model
