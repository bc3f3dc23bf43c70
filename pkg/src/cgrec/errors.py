"""Exception hierarchy for cgrec.

Library code raises these; only the command line maps them to exit codes.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence


class CGRecError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CGRecError):
    """A configuration file or override failed validation."""


class ManifestError(CGRecError):
    """The hierarchy manifest is structurally invalid."""


class IngestError(CGRecError):
    """An event-log line could not be parsed.

    Attributes:
        line_no: 1-based line number of the offending record
    """

    def __init__(self, line_no: int, reason: str) -> None:
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class VocabularyError(CGRecError):
    """Observed categories that the manifest does not declare."""

    def __init__(self, offenders: Sequence[tuple[str, int, str]]) -> None:
        shown = ", ".join(f"{d}/level{h}/{label}" for d, h, label in offenders[:20])
        more = f" (+{len(offenders) - 20} more)" if len(offenders) > 20 else ""
        super().__init__(f"{len(offenders)} categories not in manifest: {shown}{more}")
        self.offenders = list(offenders)


class ProfileError(CGRecError):
    """A synthetic profile violates its invariants."""


class EncodingError(CGRecError):
    """Ids outside the vocabulary, or a PAD id where a real id is required."""


class GameError(CGRecError):
    """Invalid cooperative game input (missing coalitions, D out of range, non-finite values)."""


class EmptyBatchError(CGRecError):
    """A batch carries no valid training target."""


class EmptyDatasetError(CGRecError):
    """No usable sequences after ingestion and splitting."""


class TrainingDivergedError(CGRecError):
    """The training loss became non-finite.

    Attributes:
        step: global optimizer step at which the loss was observed
        gamma: normalized domain weights in use at that step
        domain_loss: per-domain loss breakdown of the failing batch
    """

    def __init__(self, step: int, gamma: Sequence[float], domain_loss: Mapping[int, float]) -> None:
        super().__init__(
            f"non-finite loss at step {step}; gamma={list(gamma)} domain_loss={dict(domain_loss)}"
        )
        self.step = step
        self.gamma = list(gamma)
        self.domain_loss = dict(domain_loss)


class ArtifactError(CGRecError):
    """Missing inputs on disk, or an output directory that may not be overwritten."""
