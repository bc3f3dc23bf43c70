"""Domain-hybrid sequences and everything needed to get them off disk.

Event logs are tab-separated lines::

    user_id <TAB> domain_name <TAB> cat_level_1/.../item <TAB> unix_ts

and category paths resolve against a YAML hierarchy manifest. Ids are assigned
per (domain, level) in manifest order and concatenated across domains, with
0 reserved as PAD at every level.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TextIO

import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError, EmptyDatasetError, IngestError, ManifestError, VocabularyError

logger = logging.getLogger(__name__)

PAD = 0
_FORBIDDEN = ("/", "\t", "\n", "\r")


# ---------------------------------------------------------------------------
# Hierarchy manifest
# ---------------------------------------------------------------------------


def _walk_tree(node: Any, depth: int, prefix: tuple[str, ...]) -> Iterator[tuple[str, ...]]:
    if depth == 1:
        if not isinstance(node, list):
            raise ValueError(f"expected a list of items under {'/'.join(prefix) or '<root>'}")
        for item in node:
            yield prefix + (str(item),)
        return
    if not isinstance(node, dict):
        raise ValueError(f"expected a mapping of categories under {'/'.join(prefix) or '<root>'}")
    for label, child in node.items():
        yield from _walk_tree(child, depth - 1, prefix + (str(label),))


class DomainSpec(BaseModel):
    """One domain of the manifest: its native depth and category tree."""

    model_config = ConfigDict(extra="forbid")

    name: str
    depth: int = Field(ge=1)
    tree: dict[str, Any] | list[str]

    @field_validator("name")
    @classmethod
    def _clean_name(cls, v: str) -> str:
        if not v or any(ch in v for ch in _FORBIDDEN):
            raise ValueError(f"invalid domain name {v!r}")
        return v

    @model_validator(mode="after")
    def _check_tree(self) -> DomainSpec:
        paths = list(_walk_tree(self.tree, self.depth, ()))
        if not paths:
            raise ValueError(f"domain {self.name} declares no items")
        items = [path[-1] for path in paths]
        if len(set(items)) != len(items):
            raise ValueError(f"domain {self.name}: an item is listed twice")
        per_level: list[dict[str, tuple[str, ...]]] = [{} for _ in range(self.depth)]
        for path in paths:
            for h, label in enumerate(path):
                if not label or any(ch in label for ch in _FORBIDDEN):
                    raise ValueError(f"domain {self.name}: invalid label {label!r}")
                parent = path[:h]
                seen = per_level[h].setdefault(label, parent)
                if seen != parent:
                    raise ValueError(f"domain {self.name}: label {label!r} appears under two parents at level {h + 1}")
        return self

    def item_paths(self) -> list[tuple[str, ...]]:
        """Native-depth category paths, one per item, in manifest order."""
        return list(_walk_tree(self.tree, self.depth, ()))


class HierarchyManifest(BaseModel):
    """Declared domains and their category trees. Domain ids are 1..D in listing order."""

    model_config = ConfigDict(extra="forbid")

    domains: list[DomainSpec]

    @model_validator(mode="after")
    def _unique(self) -> HierarchyManifest:
        names = [d.name for d in self.domains]
        if not names:
            raise ValueError("manifest declares no domains")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate domain names: {names}")
        return self

    @property
    def depth(self) -> int:
        """Uniform hierarchy depth H (the deepest domain)."""
        return max(d.depth for d in self.domains)

    @property
    def num_domains(self) -> int:
        return len(self.domains)

    def domain_id(self, name: str) -> int | None:
        for i, d in enumerate(self.domains, start=1):
            if d.name == name:
                return i
        return None


def load_manifest(path: Path) -> HierarchyManifest:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        return HierarchyManifest.model_validate(data)
    except (OSError, yaml.YAMLError) as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    except ValidationError as e:
        raise ManifestError(f"invalid manifest {path}: {e}") from e


def write_manifest(manifest: HierarchyManifest, path: Path) -> None:
    Path(path).write_text(yaml.safe_dump(manifest.model_dump(mode="json"), sort_keys=False), encoding="utf-8")


def pad_path(path: Sequence[str], depth: int) -> tuple[str, ...]:
    """Repeat the item label at the missing levels so every path has ``depth`` entries."""
    path = tuple(path)
    missing = depth - len(path)
    if missing < 0:
        raise ValueError(f"path {path} is deeper than {depth}")
    return path[:-1] + (path[-1],) * (missing + 1)


# ---------------------------------------------------------------------------
# Data model
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Interaction:
    """One event: its domain (1-based), H category ids (coarse to item), and clock."""

    domain_id: int
    category_ids: tuple[int, ...]
    timestamp: int

    @property
    def item_id(self) -> int:
        return self.category_ids[-1]


@dataclass
class DomainHybridSequence:
    """A user's interactions across all domains, merged chronologically."""

    user_id: str
    items: list[Interaction]

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class PaddedSequence:
    """Exactly m slots (``None`` is PAD) plus the per-slot training-target mask.

    ``target_mask[t]`` marks a term whose target is slot ``t + 1``.
    """

    tokens: tuple[Interaction | None, ...]
    target_mask: tuple[bool, ...]

    @property
    def m(self) -> int:
        return len(self.tokens)

    def domains(self) -> list[int]:
        return [PAD if tok is None else tok.domain_id for tok in self.tokens]


@dataclass(frozen=True)
class LeaveOneOutSplit:
    """Train prefix plus the held-out validation and test interactions."""

    user_id: str
    train: tuple[Interaction, ...]
    valid_target: Interaction
    test_target: Interaction

    @property
    def test_domain(self) -> int:
        return self.test_target.domain_id

    def valid_input(self) -> list[Interaction]:
        return list(self.train)

    def test_input(self) -> list[Interaction]:
        return [*self.train, self.valid_target]

    def history_items(self) -> set[int]:
        """Item ids of the full history (train, valid and test)."""
        return {x.item_id for x in self.train} | {self.valid_target.item_id, self.test_target.item_id}


@dataclass
class HierVocab:
    """Per-(domain, level) contiguous id ranges, concatenated per level.

    ``ranges[(d, h)]`` is the inclusive ``(lo, hi)`` range of domain ``d`` at
    level ``h`` (both 1-based). Id 0 is PAD at every level.
    """

    domain_names: list[str]
    native_depths: list[int]
    depth: int
    ranges: dict[tuple[int, int], tuple[int, int]]
    labels: list[list[str]]  # labels[h-1][id] with labels[h-1][0] == "<pad>"
    _index: dict[tuple[int, int], dict[str, int]] = field(default_factory=dict, repr=False)

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)

    def level_size(self, h: int) -> int:
        """|I^{.,h}|, excluding PAD."""
        return len(self.labels[h - 1]) - 1

    def table_size(self, h: int) -> int:
        """Rows of the level-h embedding table, PAD included."""
        return len(self.labels[h - 1])

    def range_of(self, domain_id: int, h: int) -> tuple[int, int]:
        return self.ranges[(domain_id, h)]

    def encode_path(self, domain_id: int, path: Sequence[str]) -> tuple[int, ...]:
        padded = pad_path(path, self.depth)
        return tuple(self._index[(domain_id, h)][label] for h, label in enumerate(padded, start=1))

    def native_path(self, interaction: Interaction) -> tuple[str, ...]:
        """Category labels at the domain's native depth."""
        native = self.native_depths[interaction.domain_id - 1]
        full = [self.labels[h][cid] for h, cid in enumerate(interaction.category_ids)]
        return tuple(full[: native - 1]) + (full[-1],)

    def item_domain(self) -> list[int]:
        """Domain id of every level-H id (index 0 is PAD)."""
        owner = [PAD] * self.table_size(self.depth)
        for d in range(1, self.num_domains + 1):
            lo, hi = self.ranges[(d, self.depth)]
            owner[lo : hi + 1] = [d] * (hi - lo + 1)
        return owner

    def fingerprint(self) -> str:
        payload = json.dumps({"domains": self.domain_names, "labels": self.labels}, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def build_vocab(observed: Iterable[tuple[str, Sequence[str]]], manifest: HierarchyManifest) -> HierVocab:
    """Assign ids from the manifest and check that every observed path is declared.

    Args:
        observed: (domain name, category path) pairs seen in the data; paths
            may be native depth or already padded to H
        manifest: declared hierarchy

    Returns:
        The vocabulary; identical for identical manifests

    Raises:
        VocabularyError: if any observed category is missing from the manifest
    """
    depth = manifest.depth
    ranges: dict[tuple[int, int], tuple[int, int]] = {}
    labels: list[list[str]] = [["<pad>"] for _ in range(depth)]
    index: dict[tuple[int, int], dict[str, int]] = {}

    for d, spec in enumerate(manifest.domains, start=1):
        per_level: list[dict[str, None]] = [{} for _ in range(depth)]
        for path in spec.item_paths():
            for h, label in enumerate(pad_path(path, depth)):
                per_level[h].setdefault(label, None)
        for h in range(1, depth + 1):
            lo = len(labels[h - 1])
            ordered = list(per_level[h - 1])
            labels[h - 1].extend(ordered)
            ranges[(d, h)] = (lo, lo + len(ordered) - 1)
            index[(d, h)] = {label: lo + i for i, label in enumerate(ordered)}

    offenders: list[tuple[str, int, str]] = []
    for name, path in observed:
        d = manifest.domain_id(name)
        if d is None:
            continue
        for h, label in enumerate(pad_path(path, depth), start=1):
            if label not in index[(d, h)]:
                offenders.append((name, h, label))
    if offenders:
        raise VocabularyError(sorted(set(offenders)))

    return HierVocab(
        domain_names=[spec.name for spec in manifest.domains],
        native_depths=[spec.depth for spec in manifest.domains],
        depth=depth,
        ranges=ranges,
        labels=labels,
        _index=index,
    )


# ---------------------------------------------------------------------------
# Event log
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EventRecord:
    user_id: str
    domain: str
    path: tuple[str, ...]
    timestamp: int
    line_no: int


@dataclass(frozen=True)
class RejectedRecord:
    line_no: int
    reason: str


@dataclass
class Corpus:
    """Result of ingestion: sequences plus the vocabulary they are encoded with."""

    sequences: list[DomainHybridSequence]
    vocab: HierVocab
    manifest: HierarchyManifest
    rejected: list[RejectedRecord] = field(default_factory=list)


def parse_event_line(line: str, line_no: int) -> EventRecord:
    fields = line.rstrip("\r\n").split("\t")
    if len(fields) != 4:
        raise IngestError(line_no, f"expected 4 tab-separated fields, got {len(fields)}")
    user, domain, raw_path, raw_ts = fields
    if not user:
        raise IngestError(line_no, "empty user id")
    path = tuple(raw_path.split("/"))
    if not raw_path or any(not part for part in path):
        raise IngestError(line_no, f"malformed category path {raw_path!r}")
    try:
        ts = int(raw_ts)
    except ValueError:
        raise IngestError(line_no, f"timestamp is not an integer: {raw_ts!r}") from None
    return EventRecord(user_id=user, domain=domain, path=path, timestamp=ts, line_no=line_no)


def ingest_events(lines: Iterable[str | bytes], manifest: HierarchyManifest) -> Corpus:
    """Turn event-log lines into one chronologically sorted sequence per user.

    Records naming an undeclared domain are rejected and reported; ties on
    the timestamp keep input order. Users appear in order of first record.
    Byte lines are decoded as UTF-8 one at a time.

    Raises:
        IngestError: a line is malformed (the error names the line number)
        VocabularyError: categories missing from the manifest
    """
    depth = manifest.depth
    records: list[EventRecord] = []
    rejected: list[RejectedRecord] = []
    for line_no, raw in enumerate(lines, start=1):
        if isinstance(raw, bytes):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError:
                raise IngestError(line_no, "invalid UTF-8") from None
        else:
            line = raw
        if not line.strip() or line.startswith("#"):
            continue
        rec = parse_event_line(line, line_no)
        d = manifest.domain_id(rec.domain)
        if d is None:
            rejected.append(RejectedRecord(line_no, f"unknown domain {rec.domain!r}"))
            logger.warning("rejected record", extra={"line_no": line_no, "domain": rec.domain})
            continue
        native = manifest.domains[d - 1].depth
        if len(rec.path) not in (native, depth):
            raise IngestError(line_no, f"path has {len(rec.path)} levels; domain {rec.domain} has {native}")
        if len(rec.path) != native and rec.path != pad_path(rec.path[: native - 1] + rec.path[-1:], depth):
            raise IngestError(line_no, "padded levels must repeat the item label")
        records.append(rec)

    vocab = build_vocab(((r.domain, r.path) for r in records), manifest)

    grouped: dict[str, list[Interaction]] = {}
    for rec in records:
        d = manifest.domain_id(rec.domain)
        assert d is not None
        grouped.setdefault(rec.user_id, []).append(
            Interaction(domain_id=d, category_ids=vocab.encode_path(d, rec.path), timestamp=rec.timestamp)
        )
    sequences = [
        DomainHybridSequence(user_id=user, items=sorted(items, key=lambda x: x.timestamp))
        for user, items in grouped.items()
    ]
    logger.info(
        "ingested events",
        extra={"users": len(sequences), "interactions": len(records), "rejected": len(rejected)},
    )
    return Corpus(sequences=sequences, vocab=vocab, manifest=manifest, rejected=rejected)


def ingest_files(events: Path, manifest_path: Path) -> Corpus:
    manifest = load_manifest(manifest_path)
    with open(events, "rb") as fh:
        return ingest_events(fh, manifest)


def format_events(sequences: Iterable[DomainHybridSequence], vocab: HierVocab) -> Iterator[str]:
    for seq in sequences:
        for x in seq.items:
            path = "/".join(vocab.native_path(x))
            yield f"{seq.user_id}\t{vocab.domain_names[x.domain_id - 1]}\t{path}\t{x.timestamp}\n"


def write_events(sequences: Iterable[DomainHybridSequence], vocab: HierVocab, out: Path | TextIO) -> int:
    """Serialize sequences to the event-log format. Returns the number of lines written."""
    if isinstance(out, (str, Path)):
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            return write_events(sequences, vocab, fh)
    n = 0
    for line in format_events(sequences, vocab):
        out.write(line)
        n += 1
    return n


# ---------------------------------------------------------------------------
# Padding, splitting, filters
# ---------------------------------------------------------------------------


def target_mask_for(tokens: Sequence[Interaction | None]) -> tuple[bool, ...]:
    """True at t when slots t and t+1 are both real interactions."""
    m = len(tokens)
    return tuple(t + 1 < m and tokens[t] is not None and tokens[t + 1] is not None for t in range(m))


def pad_truncate(seq: DomainHybridSequence | Sequence[Interaction], m: int) -> PaddedSequence:
    """Left-pad with PAD (or keep the most recent ``m``) to exactly ``m`` slots."""
    if m < 2:
        raise ConfigError(f"sequence window must be >= 2, got {m}")
    items = seq.items if isinstance(seq, DomainHybridSequence) else list(seq)
    kept = list(items[-m:])
    tokens: tuple[Interaction | None, ...] = (None,) * (m - len(kept)) + tuple(kept)
    return PaddedSequence(tokens=tokens, target_mask=target_mask_for(tokens))


def split_leave_one_out(seq: DomainHybridSequence) -> LeaveOneOutSplit:
    """Hold out the last interaction for test and the one before it for validation."""
    if len(seq.items) < 3:
        raise EmptyDatasetError(f"user {seq.user_id}: need at least 3 interactions, got {len(seq.items)}")
    return LeaveOneOutSplit(
        user_id=seq.user_id,
        train=tuple(seq.items[:-2]),
        valid_target=seq.items[-2],
        test_target=seq.items[-1],
    )


@dataclass
class SplitResult:
    splits: list[LeaveOneOutSplit]
    excluded: int


def split_corpus(sequences: Iterable[DomainHybridSequence], min_length: int = 3) -> SplitResult:
    splits: list[LeaveOneOutSplit] = []
    excluded = 0
    for seq in sequences:
        if len(seq.items) < max(3, min_length):
            excluded += 1
            continue
        splits.append(split_leave_one_out(seq))
    if excluded:
        logger.info("excluded short sequences", extra={"excluded": excluded, "kept": len(splits)})
    return SplitResult(splits=splits, excluded=excluded)


def filter_min_per_domain(
    sequences: Iterable[DomainHybridSequence], k: int, num_domains: int
) -> list[DomainHybridSequence]:
    """Keep sequences with at least ``k`` interactions in every domain."""
    if k <= 0:
        return list(sequences)
    kept = []
    for seq in sequences:
        counts = [0] * (num_domains + 1)
        for x in seq.items:
            counts[x.domain_id] += 1
        if min(counts[1:]) >= k:
            kept.append(seq)
    return kept


def dataset_statistics(sequences: Sequence[DomainHybridSequence], vocab: HierVocab) -> pd.DataFrame:
    """Per-domain users, items, interactions and sparsity."""
    rows = []
    total_users = len(sequences)
    for d, name in enumerate(vocab.domain_names, start=1):
        lo, hi = vocab.range_of(d, vocab.depth)
        n_items = hi - lo + 1
        users = sum(1 for s in sequences if any(x.domain_id == d for x in s.items))
        interactions = sum(1 for s in sequences for x in s.items if x.domain_id == d)
        denom = total_users * n_items
        rows.append(
            {
                "domain": name,
                "users": users,
                "items": n_items,
                "interactions": interactions,
                "sparsity": 1.0 - interactions / denom if denom else 1.0,
            }
        )
    return pd.DataFrame(rows, columns=["domain", "users", "items", "interactions", "sparsity"])
