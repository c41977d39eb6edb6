"""Task generators: structure, label correctness, balance, determinism."""

import numpy as np
import pytest

from astroseq.errors import InvalidArgumentError
from astroseq.tasks import (
    CopyTask,
    KVRetrievalTask,
    ListOpsTask,
    PAD_ID,
    make_task,
)


def label_shares(batches, n_classes):
    counts = np.zeros(n_classes)
    for b in batches:
        counts[b.label] += 1
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# copy


def test_copy_layout_and_label():
    task = CopyTask(seg_len=4, n_segments=2, n_classes=5)
    rng = np.random.default_rng(0)
    for _ in range(50):
        tokens, label = task.sample(rng)
        assert tokens.shape == (8,)
        assert tokens[0] == task.payload_id(label)
        assert tokens[-1] == task.QUERY
        assert np.all(tokens[1:-1] == task.FILLER)
        assert PAD_ID not in tokens
        assert tokens.max() < task.spec.vocab_size


def test_copy_fills_every_segment():
    task = CopyTask(seg_len=4, n_segments=2)
    for batch in task.dataset(20, seed=0):
        assert batch.mask.all()


def test_copy_balance_and_determinism():
    task = CopyTask(seg_len=4, n_segments=2, n_classes=4)
    data = task.dataset(10000, seed=0)
    shares = label_shares(data, 4)
    assert np.abs(shares - 0.25).max() < 0.02
    again = task.dataset(10, seed=0)
    for a, b in zip(data[:10], again):
        assert np.array_equal(a.ids, b.ids) and a.label == b.label
    other_split = task.dataset(10, seed=0, split=1)
    assert any(
        not np.array_equal(a.ids, b.ids) for a, b in zip(again, other_split)
    )


# ---------------------------------------------------------------------------
# kv retrieval


def pairs_in(tokens, task):
    """(position, key index, value index) for every key/value pair."""
    found = []
    k_lo, k_hi = 3, 3 + task.n_keys
    v_lo = k_hi
    for i, t in enumerate(tokens[:-1]):
        if k_lo <= t < k_hi and tokens[i + 1] >= v_lo:
            found.append((i, int(t - k_lo), int(tokens[i + 1] - v_lo)))
    return found


def test_kv_structure_and_label():
    task = KVRetrievalTask(seg_len=6, n_segments=8, n_classes=4, n_keys=6, n_distractors=3)
    spec = task.spec
    rng = np.random.default_rng(1)
    for _ in range(100):
        tokens, label = task.sample(rng)
        assert tokens.shape == (spec.capacity,)
        assert tokens[0] == task.ANNOUNCE
        announced = int(tokens[1]) - 3
        assert 0 <= announced < task.n_keys
        pairs = pairs_in(tokens, task)
        assert len(pairs) == 1 + task.n_distractors
        matches = [p for p in pairs if p[1] == announced]
        assert len(matches) == 1
        pos, _, value = matches[0]
        assert value == label
        # The informative pair sits in the second half of the segments.
        segment = pos // spec.seg_len + 1
        assert segment >= 1 + (spec.n_segments + 1) // 2
        assert all(p[1] != announced for p in pairs if p[0] != pos)


def test_kv_balance():
    task = KVRetrievalTask(seg_len=6, n_segments=4, n_classes=4)
    shares = label_shares(task.dataset(10000, seed=0), 4)
    assert np.abs(shares - 0.25).max() < 0.02


def test_kv_rejects_impossible_layouts():
    with pytest.raises(InvalidArgumentError):
        KVRetrievalTask(seg_len=2, n_segments=2, n_distractors=5)
    with pytest.raises(InvalidArgumentError):
        KVRetrievalTask(seg_len=6, n_segments=1)


# ---------------------------------------------------------------------------
# listops


def eval_listops_tokens(tokens):
    """Independent parser/evaluator used as the oracle for labels."""
    pos = 0

    def parse():
        nonlocal pos
        t = int(tokens[pos])
        if 1 <= t <= 10:
            pos += 1
            return t - 1
        assert t == 15, f"expected OPEN at {pos}, got {t}"
        pos += 1
        op = int(tokens[pos])
        pos += 1
        args = []
        while int(tokens[pos]) != 16:
            args.append(parse())
        pos += 1
        if op == 11:
            return min(args)
        if op == 12:
            return max(args)
        if op == 13:
            srt = sorted(args)
            return srt[(len(srt) - 1) // 2]
        assert op == 14
        return sum(args) % 10

    value = parse()
    assert pos == len(tokens)
    return value


def test_listops_reduction_semantics():
    assert ListOpsTask.apply_op("MAX", [2, 4, 1]) == 4
    assert ListOpsTask.apply_op("MIN", [2, 4, 1]) == 1
    assert ListOpsTask.apply_op("MED", [1, 2, 3, 4]) == 2  # lower median
    assert ListOpsTask.apply_op("MED", [9, 0, 5]) == 5
    assert ListOpsTask.apply_op("SUMMOD", [7, 8]) == 5
    with pytest.raises(InvalidArgumentError):
        ListOpsTask.apply_op("AVG", [1, 2])


def test_listops_labels_match_independent_evaluator():
    task = ListOpsTask(seg_len=8, n_segments=4, max_depth=3, max_args=3)
    rng = np.random.default_rng(2)
    for _ in range(200):
        tokens, label = task.sample(rng)
        assert len(tokens) <= task.spec.capacity
        assert eval_listops_tokens(tokens) == label


def test_listops_dataset_is_quota_balanced():
    task = ListOpsTask(seg_len=8, n_segments=2)
    shares = label_shares(task.dataset(10000, seed=0), 10)
    assert np.abs(shares - 0.1).max() < 0.02


def test_listops_segments_carry_expression():
    task = ListOpsTask(seg_len=4, n_segments=4)
    batch = task.dataset(1, seed=3)[0]
    assert batch.mask[0].all()
    flat = batch.ids.reshape(-1)[: batch.length]
    assert eval_listops_tokens(flat) == batch.label


# ---------------------------------------------------------------------------
# factory


def test_make_task_dispatch_and_errors():
    task = make_task("copy", seg_len=4, n_segments=2, n_classes=6)
    assert task.spec.n_classes == 6
    with pytest.raises(InvalidArgumentError):
        make_task("sorting", seg_len=4, n_segments=2)
    with pytest.raises(InvalidArgumentError):
        make_task("copy", seg_len=4, n_segments=2, bogus=1)
