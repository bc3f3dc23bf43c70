import pytest
import torch

from cgrec.batching import SequenceBatch
from cgrec.sequence_store import Interaction, pad_truncate


def _seq(*domains: int) -> list[Interaction]:
    return [Interaction(d, (d, 10 + t), t) for t, d in enumerate(domains)]


def test_left_padding_and_targets():
    batch = SequenceBatch.from_histories([_seq(1, 2, 1)], m=5, depth=2, user_ids=["u"])
    assert batch.domains.tolist() == [[0, 0, 1, 2, 1]]
    assert batch.target_mask.tolist() == [[False, False, True, True, False]]
    assert batch.target_ids()[0, 2].tolist() == [2, 11]
    assert batch.target_domains().tolist() == [[0, 1, 2, 1, 0]]
    assert batch.user_ids == ("u",)


def test_context_index_carries_forward():
    batch = SequenceBatch.from_histories([_seq(1, 2, 1, 3)], m=5, depth=2)
    restricted = batch.restrict({1, 3})
    idx, has = restricted.context_index()
    # slots: pad, d1, (d2 masked), d1, d3
    assert idx.tolist() == [[0, 1, 1, 3, 4]]
    assert has.tolist() == [[False, True, True, True, True]]
    assert restricted.target_mask.tolist() == [[False, False, True, True, False]]


def test_select_keeps_rows_and_users():
    batch = SequenceBatch.from_histories([_seq(1, 1), _seq(2, 2, 2), _seq(1, 2)], m=3, depth=2, user_ids="abc")
    picked = batch.select(torch.tensor([2, 0]))
    assert picked.user_ids == ("c", "a")
    assert torch.equal(picked.ids, batch.ids[[2, 0]])
    assert torch.equal(picked.target_mask, batch.target_mask[[2, 0]])


def test_inconsistent_rows_are_rejected():
    with pytest.raises(ValueError):
        SequenceBatch.from_padded([], depth=2)
    with pytest.raises(ValueError):
        SequenceBatch.from_padded([pad_truncate(_seq(1, 2), 3), pad_truncate(_seq(1, 2), 4)], depth=2)
    with pytest.raises(ValueError):
        SequenceBatch.from_padded([pad_truncate(_seq(1, 2), 3)], depth=3)
