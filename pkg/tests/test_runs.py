import json

import numpy as np
import pandas as pd
import pytest

from cgrec.coalition_game import GammaState, update_gamma
from cgrec.config import Variant, load_run_config
from cgrec.errors import ArtifactError
from cgrec.evaluator import RankedCase, aggregate
from cgrec.model import build_model, load_checkpoint, save_checkpoint
from cgrec.plotting import plot_gamma_trajectory, plot_metric_bars
from cgrec.runs import RunDirectory
from cgrec.trainer import EpochLog, FitResult, TrainingReport

from conftest import tiny_config


def _fit_result(vocab, variant=Variant.FULL) -> FitResult:
    model = build_model(vocab, tiny_config(variant=variant))
    history = [GammaState.uniform(vocab.num_domains, 0.7, 0.3, 0.1)]
    for phi in ([0.2, -0.1], [0.1, -0.3]):
        history.append(update_gamma(history[-1], np.array(phi)))
    report = TrainingReport(
        metric="ndcg@5",
        epochs=[EpochLog(1, 0.9, {1: 0.5, 2: 0.4}, history[-1].weights.tolist(), {"ndcg@5": 0.2})],
        gamma_history=history,
        best_epoch=1,
        best_metric=0.2,
        steps=2,
        gamma_refreshes=2,
        train_rows=7,
    )
    return FitResult(model=model, report=report, splits=[], gamma=history[-1])


def test_create_refuses_non_empty_directory(tmp_path):
    (tmp_path / "run").mkdir()
    (tmp_path / "run" / "old.txt").write_text("x")
    with pytest.raises(ArtifactError):
        RunDirectory.create(tmp_path / "run")
    run = RunDirectory.create(tmp_path / "run", overwrite=True)
    assert list(run.root.iterdir()) == []


def test_training_artifacts(tmp_path, two_domain_vocab):
    run = RunDirectory.create(tmp_path / "run")
    result = _fit_result(two_domain_vocab)
    written = run.write_training(result, two_domain_vocab)
    assert {p.name for p in written} == {"model.pt", "metrics_log.tsv", "gamma.tsv", "train_report.json"}

    gamma = run.read_gamma()
    assert gamma.columns.tolist() == ["step", "gamma_a", "gamma_b"]
    np.testing.assert_allclose(gamma.iloc[-1, 1:].to_numpy(), result.gamma.weights, atol=1e-8)
    log = pd.read_csv(run.root / "metrics_log.tsv", sep="\t")
    assert log.columns.tolist() == ["epoch", "loss", "loss_a", "loss_b", "valid_ndcg@5"]
    summary = json.loads((run.root / "train_report.json").read_text())
    assert summary["gamma_refreshes"] == 2
    assert summary["final_gamma"] == result.gamma.weights.tolist()

    checkpoint = load_checkpoint(run.checkpoint, two_domain_vocab)
    assert checkpoint.gamma["step"] == 2
    assert checkpoint.extra["best_epoch"] == 1


def test_unweighted_variant_has_no_gamma_log(tmp_path, two_domain_vocab):
    run = RunDirectory.create(tmp_path / "run")
    run.write_training(_fit_result(two_domain_vocab, Variant.HCL), two_domain_vocab)
    assert not (run.root / "gamma.tsv").exists()
    assert load_checkpoint(run.checkpoint).gamma is None
    with pytest.raises(ArtifactError):
        run.read_gamma()


def test_checkpoint_rejects_other_vocabulary(tmp_path, vocab, two_domain_vocab):
    path = tmp_path / "model.pt"
    model = build_model(two_domain_vocab, tiny_config())
    save_checkpoint(path, model, two_domain_vocab)
    with pytest.raises(ArtifactError):
        load_checkpoint(path, vocab)
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(ArtifactError):
        load_checkpoint(tmp_path / "junk.pt")


def test_config_and_seeds_snapshot(tmp_path):
    run = RunDirectory.create(tmp_path / "run")
    config = load_run_config(overrides=["train.seed=9", "eval.seed=3"])
    run.write_config(config)
    run.write_seeds(config)
    assert run.read_config() == config
    seeds = json.loads((run.root / "seeds.json").read_text())
    assert (seeds["train"], seeds["eval"]) == (9, 3)
    with pytest.raises(ArtifactError):
        RunDirectory(tmp_path / "elsewhere").read_config()


def test_plots(tmp_path, two_domain_vocab):
    runs = []
    for name, ranks in (("bsa", [3, 8]), ("full", [1, 2])):
        run = RunDirectory.create(tmp_path / name)
        run.write_training(_fit_result(two_domain_vocab), two_domain_vocab)
        cases = [RankedCase("u1", 1, ranks[0], 100), RankedCase("u2", 2, ranks[1], 100)]
        run.write_eval(aggregate(cases, two_domain_vocab.domain_names))
        runs.append(run.root)
    assert plot_gamma_trajectory(runs[1]).name == "gamma.png"
    out = plot_metric_bars(runs, tmp_path / "fig" / "bars.png", "mrr")
    assert out.stat().st_size > 0
    with pytest.raises(ArtifactError):
        plot_metric_bars([], tmp_path / "none.png")
    with pytest.raises(ArtifactError):
        plot_metric_bars([tmp_path / "missing"], tmp_path / "none.png")
