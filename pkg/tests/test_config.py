import json

import pytest
import yaml

from cgrec.config import (
    RunConfig,
    Variant,
    apply_overrides,
    config_hash,
    dump_config,
    load_run_config,
    read_structured,
)
from cgrec.errors import ConfigError


def test_defaults():
    config = load_run_config()
    assert config.train.variant is Variant.FULL
    assert (config.train.alpha, config.train.beta, config.train.temperature) == (0.7, 0.3, 0.1)
    assert config.eval.num_negatives == 99
    assert config.eval.domain_restricted
    assert config.synth.num_domains == 3
    assert config.data.min_length == 3


def test_overrides_are_typed():
    config = load_run_config(
        overrides=["train.variant=bsa", "train.dim=64", "train.patience=3", "eval.domain_restricted=false"]
    )
    assert config.train.variant is Variant.BSA
    assert config.train.dim == 64
    assert config.train.patience == 3
    assert config.eval.domain_restricted is False


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"train": {"epochs": 5, "lr": 0.01}, "output_dir": "runs/x"}))
    config = load_run_config(path, ["train.epochs=7"])
    assert config.train.epochs == 7
    assert config.train.lr == 0.01
    assert str(config.output_dir) == "runs/x"


def test_json_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"eval": {"num_negatives": 49}}))
    assert load_run_config(path).eval.num_negatives == 49


@pytest.mark.parametrize(
    "overrides",
    [
        ["train.hidden=3"],
        ["bogus=1"],
        ["train.dim=6", "train.num_heads=4"],
        ["train.temperature=0"],
        ["train.variant=everything"],
        ["data.min_length=2"],
        ["synth.min_len=9", "synth.max_len=4"],
    ],
)
def test_invalid_settings(overrides):
    with pytest.raises(ConfigError):
        load_run_config(overrides=overrides)


@pytest.mark.parametrize("item", ["train.dim", "=3", "train.dim.x=3"])
def test_malformed_overrides(item):
    with pytest.raises(ConfigError):
        apply_overrides({"train": {"dim": 4}}, [item])


def test_unreadable_and_non_mapping_files(tmp_path):
    with pytest.raises(ConfigError):
        read_structured(tmp_path / "missing.yaml")
    listing = tmp_path / "list.yaml"
    listing.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        read_structured(listing)
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert read_structured(empty) == {}


@pytest.mark.parametrize(
    "name, text",
    [("broken.yaml", "train: {dim: [\n"), ("broken.json", '{"train": '), ("binary.yaml", None)],
)
def test_unparseable_files(tmp_path, name, text):
    path = tmp_path / name
    if text is None:
        path.write_bytes(b"train: {dim: \xff}\n")
    else:
        path.write_text(text)
    with pytest.raises(ConfigError):
        load_run_config(path)


def test_unparseable_override_value():
    with pytest.raises(ConfigError, match="train.dim"):
        load_run_config(overrides=["train.dim=[1"])


def test_dump_reloads_to_the_same_config(tmp_path):
    config = load_run_config(overrides=["train.variant=lrl", "ablation.seeds=[1, 2]"])
    path = tmp_path / "snapshot.yaml"
    path.write_text(dump_config(config))
    again = load_run_config(path)
    assert again == config
    assert config_hash(again) == config_hash(config)


def test_hash_tracks_content():
    a = RunConfig()
    b = load_run_config(overrides=["train.seed=1"])
    assert config_hash(a) == config_hash(RunConfig())
    assert config_hash(a) != config_hash(b)
    assert len(config_hash(a)) == 64


@pytest.mark.parametrize(
    "variant, hierarchical, uses_gamma",
    [(Variant.BSA, False, False), (Variant.HCL, True, False), (Variant.LRL, False, True), (Variant.FULL, True, True)],
)
def test_variant_components(variant, hierarchical, uses_gamma):
    assert variant.hierarchical is hierarchical
    assert variant.uses_gamma is uses_gamma


def test_category_inputs_follow_variant():
    assert load_run_config(overrides=["train.variant=hcl"]).train.embeds_categories
    assert not load_run_config(overrides=["train.variant=lrl"]).train.embeds_categories
    assert load_run_config(overrides=["train.variant=bsa", "train.category_inputs=on"]).train.embeds_categories
