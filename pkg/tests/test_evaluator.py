import copy
import json
import math

import numpy as np
import pandas as pd
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from torch import nn

from cgrec.config import METRIC_NAMES, EvalConfig
from cgrec.errors import EmptyDatasetError
from cgrec.evaluator import (
    CandidatePools,
    EvalReport,
    RankedCase,
    aggregate,
    average_reports,
    case_metrics,
    evaluate,
    ndcg_at,
    relative_gain_table,
    write_report,
)
from cgrec.model import build_model
from cgrec.sequence_store import (
    DomainHybridSequence,
    HierarchyManifest,
    Interaction,
    build_vocab,
    split_corpus,
)

from conftest import random_sequences, tiny_config


def _report(overall: float, per_domain: dict[str, float], seed: int | None = None) -> EvalReport:
    return EvalReport(
        metrics={d: {k: v for k in METRIC_NAMES} for d, v in per_domain.items()},
        counts={d: 10 for d in per_domain},
        overall={k: overall for k in METRIC_NAMES},
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def test_rank_one_is_perfect():
    assert case_metrics(np.array([1])) == {"hr@5": 1.0, "hr@10": 1.0, "ndcg@5": 1.0, "ndcg@10": 1.0, "mrr": 1.0}


def test_rank_six():
    m = case_metrics(np.array([6]))
    assert m["hr@5"] == 0.0
    assert m["hr@10"] == 1.0
    assert m["ndcg@5"] == 0.0
    assert m["ndcg@10"] == pytest.approx(1 / math.log2(7))
    assert m["ndcg@10"] == pytest.approx(0.3562, abs=1e-4)
    assert m["mrr"] == pytest.approx(1 / 6)


def test_half_the_cases_hit():
    m = case_metrics(np.array([1, 11]))
    assert m["hr@10"] == 0.5
    assert m["mrr"] == pytest.approx((1 + 1 / 11) / 2)


@given(st.lists(st.integers(1, 200), min_size=1, max_size=50))
def test_metric_orderings(ranks):
    m = case_metrics(np.array(ranks))
    assert 0.0 <= m["ndcg@5"] <= m["ndcg@10"] <= m["hr@10"] <= 1.0
    assert m["ndcg@5"] <= m["hr@5"] <= m["hr@10"]
    assert 0.0 < m["mrr"] <= 1.0
    assert np.all(ndcg_at(np.array(ranks), 10) <= 1.0)


def test_aggregate_matches_brute_force():
    rng = np.random.default_rng(0)
    cases = [
        RankedCase(f"u{i}", int(rng.integers(1, 4)), int(rng.integers(1, 101)), num_candidates=100)
        for i in range(10_000)
    ]
    report = aggregate(cases, ["x", "y", "z"], seed=5)
    for d, name in enumerate(["x", "y", "z"], start=1):
        ranks = [c.rank for c in cases if c.domain_id == d]
        assert report.counts[name] == len(ranks)
        hr10 = sum(1 for r in ranks if r <= 10) / len(ranks)
        ndcg5 = sum(1 / math.log2(r + 1) for r in ranks if r <= 5) / len(ranks)
        mrr = sum(1 / r for r in ranks) / len(ranks)
        assert report.metrics[name]["hr@10"] == pytest.approx(hr10, abs=1e-12)
        assert report.metrics[name]["ndcg@5"] == pytest.approx(ndcg5, abs=1e-12)
        assert report.metrics[name]["mrr"] == pytest.approx(mrr, abs=1e-12)
    assert report.total == 10_000
    assert report.seed == 5
    assert report.overall["mrr"] == pytest.approx(sum(1 / c.rank for c in cases) / 10_000, abs=1e-12)


def test_aggregate_needs_cases():
    with pytest.raises(EmptyDatasetError):
        aggregate([])


def test_evaluate_without_users(tiny_model, two_domain_vocab):
    with pytest.raises(EmptyDatasetError):
        evaluate([], tiny_model, two_domain_vocab, seed=0)


# ---------------------------------------------------------------------------
# Candidates and ranking
# ---------------------------------------------------------------------------


def test_negatives_avoid_history_and_stay_in_domain(vocab):
    pools = CandidatePools(vocab)
    lo, hi = vocab.range_of(1, vocab.depth)
    exclude = {lo, lo + 2}
    negs, short = pools.sample(1, exclude, 2, np.random.default_rng(0))
    assert short == 0
    assert len(set(negs.tolist())) == 2
    assert all(lo <= n <= hi and n not in exclude for n in negs)


def test_unrestricted_pool_spans_catalogue(vocab):
    pools = CandidatePools(vocab, domain_restricted=False)
    assert pools.pool(1).tolist() == list(range(1, vocab.table_size(vocab.depth)))


def test_short_pool_records_deficit(vocab):
    pools = CandidatePools(vocab)
    negs, short = pools.sample(3, {vocab.range_of(3, 2)[0]}, 10, np.random.default_rng(0))
    assert len(negs) == 2
    assert short == 8


def test_ties_count_against_the_target(tiny_model, two_domain_manifest, two_domain_vocab):
    model = copy.deepcopy(tiny_model)
    for p in model.heads.parameters():
        nn.init.zeros_(p)
    seqs = random_sequences(two_domain_manifest, two_domain_vocab, 20, torch.Generator().manual_seed(0), 3, 6)
    splits = split_corpus(seqs).splits
    report, cases = evaluate(splits, model, two_domain_vocab, seed=0, config=EvalConfig(num_negatives=99))
    for case in cases:
        assert case.rank == case.num_candidates
        assert case.deficit == 100 - case.num_candidates
    assert report.deficits == sum(c.deficit for c in cases)
    assert report.meta["stage"] == "test"


def test_random_model_mrr_matches_uniform_ranks():
    flat = {"name": "flat", "depth": 1, "tree": [f"i{i}" for i in range(300)]}
    manifest = HierarchyManifest.model_validate({"domains": [flat]})
    vocab = build_vocab((), manifest)
    rng = np.random.default_rng(1)
    seqs = [
        DomainHybridSequence(f"u{u}", [Interaction(1, (int(i),), t) for t, i in enumerate(rng.integers(1, 301, 3))])
        for u in range(2000)
    ]
    torch.manual_seed(0)
    model = build_model(vocab, tiny_config(dim=8, max_len=4)).eval()
    report, cases = evaluate(split_corpus(seqs).splits, model, vocab, seed=2, config=EvalConfig(num_negatives=99))
    assert all(c.num_candidates == 100 for c in cases)
    expected = sum(1 / r for r in range(1, 101)) / 100
    assert expected == pytest.approx(0.0519, abs=1e-4)
    sigma = math.sqrt(sum(1 / r**2 for r in range(1, 101)) / 100 - expected**2) / math.sqrt(len(cases))
    assert abs(report.overall["mrr"] - expected) < 3 * sigma


def test_evaluation_restores_training_mode(tiny_model, two_domain_manifest, two_domain_vocab):
    seqs = random_sequences(two_domain_manifest, two_domain_vocab, 5, torch.Generator().manual_seed(1), 3, 5)
    tiny_model.train()
    evaluate(split_corpus(seqs).splits, tiny_model, two_domain_vocab, seed=0, config=EvalConfig(num_negatives=2))
    assert tiny_model.training


def test_same_seed_same_report(tiny_model, two_domain_manifest, two_domain_vocab):
    seqs = random_sequences(two_domain_manifest, two_domain_vocab, 30, torch.Generator().manual_seed(2), 3, 6)
    splits = split_corpus(seqs).splits
    config = EvalConfig(num_negatives=3)
    a, _ = evaluate(splits, tiny_model, two_domain_vocab, 4, config, stage="valid")
    b, _ = evaluate(splits, tiny_model, two_domain_vocab, 4, config, stage="valid")
    assert a.to_dict() == b.to_dict()


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def test_write_report(tmp_path):
    cases = [RankedCase("u1", 1, 1, 100), RankedCase("u2", 2, 6, 98, deficit=2)]
    report = aggregate(cases, ["books", "movies"], seed=3)
    write_report(report, tmp_path / "eval", cases)
    frame = pd.read_csv(tmp_path / "eval" / "metrics.tsv", sep="\t")
    assert frame.columns.tolist() == ["domain", "cases", *METRIC_NAMES]
    assert frame["domain"].tolist() == ["books", "movies", "all"]
    summary = json.loads((tmp_path / "eval" / "summary.json").read_text())
    assert EvalReport.from_dict(summary) == report
    assert summary["deficits"] == 2
    assert len(pd.read_csv(tmp_path / "eval" / "cases.tsv", sep="\t")) == 2


def test_relative_gain_against_reference():
    reports = {"bsa": _report(0.2, {"a": 0.2, "b": 0.0}), "full": _report(0.3, {"a": 0.3, "b": 0.1})}
    table = relative_gain_table(reports, "bsa")
    row = table[(table.variant == "full") & (table.domain == "a") & (table.metric == "ndcg@5")].iloc[0]
    assert row["ratio"] == pytest.approx(1.5)
    assert table[(table.variant == "bsa") & (table.domain == "a")]["ratio"].eq(1.0).all()
    assert table[table.domain == "b"]["ratio"].isna().all()


def test_average_reports_over_seeds():
    a = _report(0.2, {"a": 0.1, "b": 0.4}, seed=1)
    b = _report(0.4, {"a": 0.3}, seed=2)
    b.deficits = 3
    mean = average_reports([a, b])
    assert list(mean.metrics) == ["a"]
    assert mean.metrics["a"]["mrr"] == pytest.approx(0.2)
    assert mean.overall["hr@5"] == pytest.approx(0.3)
    assert mean.deficits == 3
    assert mean.meta == {"seeds": [1, 2]}
    with pytest.raises(EmptyDatasetError):
        average_reports([])
