"""Run configuration.

Every knob lives in a pydantic model that forbids unknown keys. Files are YAML
or JSON; dotted ``key=value`` overrides are applied before validation.
"""

from __future__ import annotations

import hashlib
import json
from enum import StrEnum
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

METRIC_NAMES = ("hr@5", "hr@10", "ndcg@5", "ndcg@10", "mrr")


class Variant(StrEnum):
    """Ablation variants of the recommender."""

    BSA = "bsa"
    HCL = "hcl"
    LRL = "lrl"
    FULL = "full"

    @property
    def hierarchical(self) -> bool:
        """Loss (and default inputs) span all category levels."""
        return self in (Variant.HCL, Variant.FULL)

    @property
    def uses_gamma(self) -> bool:
        """Loss terms are weighted by the Shapley-driven domain weights."""
        return self in (Variant.LRL, Variant.FULL)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DomainProfile(_Strict):
    """One synthetic domain."""

    name: str
    num_items: int = Field(default=200, ge=2)
    depth: int = Field(default=2, ge=1)
    branching: int = Field(default=4, ge=2)  # coarse categories per parent
    arrival_rate: float = Field(default=1.0, gt=0)


def _default_domains() -> list[DomainProfile]:
    return [DomainProfile(name=f"domain{d}") for d in (1, 2, 3)]


class SynthProfile(_Strict):
    """Synthetic multi-domain dataset profile.

    ``cross_corr`` couples the per-domain user latent factors; ``None`` means
    the identity. Domains in ``noise_domains`` (1-based) ignore user factors.
    """

    domains: list[DomainProfile] = Field(default_factory=_default_domains)
    latent_dim: int = Field(default=8, ge=1)
    num_users: int = Field(default=5000, ge=1)
    min_len: int = Field(default=8, ge=1)
    max_len: int = Field(default=30, ge=1)
    cross_corr: list[list[float]] | None = Field(
        default_factory=lambda: [[1.0, 0.8, 0.0], [0.8, 1.0, 0.0], [0.0, 0.0, 1.0]]
    )
    noise_domains: list[int] = Field(default_factory=lambda: [3])
    sharpness: float = Field(default=3.0, gt=0)
    within_scale: float = Field(default=0.35, ge=0)
    seed: int = 7

    @property
    def num_domains(self) -> int:
        return len(self.domains)

    @model_validator(mode="after")
    def _shapes(self) -> SynthProfile:
        if self.min_len > self.max_len:
            raise ValueError(f"min_len {self.min_len} exceeds max_len {self.max_len}")
        if self.cross_corr is not None:
            d = self.num_domains
            if len(self.cross_corr) != d or any(len(row) != d for row in self.cross_corr):
                raise ValueError(f"cross_corr must be {d}x{d}")
        names = [dom.name for dom in self.domains]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate domain names: {names}")
        return self


class DataConfig(_Strict):
    """Where the event log and manifest live, plus dataset filters."""

    events: Path | None = None
    manifest: Path | None = None
    min_length: int = Field(default=3, ge=3)
    min_per_domain: int = Field(default=0, ge=0)


class TrainConfig(_Strict):
    """Model shape and optimization settings."""

    max_len: int = Field(default=50, ge=2)  # m
    dim: int = Field(default=128, ge=1)  # r
    num_layers: int = Field(default=2, ge=0)  # L
    num_heads: int = Field(default=4, ge=1)  # p
    dropout: float = Field(default=0.2, ge=0.0, lt=1.0)
    batch_size: int = Field(default=128, ge=1)
    epochs: int = Field(default=100, ge=1)
    lr: float = Field(default=1e-3, gt=0)
    optimizer: Literal["adam"] = "adam"
    variant: Variant = Variant.FULL
    alpha: float = 0.7
    beta: float = 0.3
    temperature: float = Field(default=0.1, gt=0)  # lambda
    seed: int = 42
    validation_metric: Literal["hr@5", "hr@10", "ndcg@5", "ndcg@10", "mrr"] = "ndcg@5"
    normalize_char_value: bool = True
    category_inputs: Literal["auto", "on", "off"] = "auto"
    eval_every: int = Field(default=1, ge=1)
    patience: int | None = Field(default=None, ge=1)
    strict_determinism: bool = True

    @model_validator(mode="after")
    def _heads_divide_dim(self) -> TrainConfig:
        if self.dim % self.num_heads:
            raise ValueError(f"dim {self.dim} is not divisible by num_heads {self.num_heads}")
        return self

    @property
    def embeds_categories(self) -> bool:
        if self.category_inputs == "auto":
            return self.variant.hierarchical
        return self.category_inputs == "on"


class EvalConfig(_Strict):
    num_negatives: int = Field(default=99, ge=1)
    domain_restricted: bool = True
    batch_size: int = Field(default=256, ge=1)
    dump_cases: bool = False
    seed: int | None = None


class LoggingConfig(_Strict):
    level: str = "INFO"
    format: Literal["json", "text"] = "json"


class AblationConfig(_Strict):
    variants: list[Variant] = Field(default_factory=lambda: list(Variant))
    seeds: list[int] = Field(default_factory=lambda: [42])
    reference: Variant = Variant.BSA


class RunConfig(_Strict):
    """Top-level configuration for every command."""

    output_dir: Path = Path("runs/default")
    overwrite: bool = False
    synth: SynthProfile = Field(default_factory=SynthProfile)
    data: DataConfig = Field(default_factory=DataConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)


def read_structured(path: Path) -> dict[str, Any]:
    """Read a YAML or JSON mapping from disk."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    try:
        if Path(path).suffix.lower() == ".json":
            data = json.loads(text)
        else:
            data = yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``a.b.c=value`` overrides in place; values are parsed as YAML scalars."""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like key=value: {item!r}")
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a section")
            node = child
        try:
            node[leaf] = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"override {key!r}: cannot parse value {raw!r}") from e
    return data


def load_run_config(path: Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    data = read_structured(path) if path is not None else {}
    apply_overrides(data, overrides or [])
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def dump_config(config: BaseModel) -> str:
    """Canonical YAML snapshot of a config model."""
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)


def config_hash(config: BaseModel) -> str:
    payload = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
