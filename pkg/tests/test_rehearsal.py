import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from scadcl.rehearsal import (
    BufferEntry, ReplayBatch, ReplayBuffer, ace_class_mask, loss_der, loss_er, reservoir_insert, sample_batch,
    seen_mask,
)


def _entry(i, n_classes=4, label=None, masks=True):
    y = np.zeros(n_classes, dtype=np.uint8)
    y[i % n_classes if label is None else label] = 1
    return BufferEntry(
        sample=np.full((3, 2, 2), i, dtype=np.float32), label=y,
        logits=np.linspace(-1, 1, n_classes).astype(np.float32) * i,
        masks=np.ones((2, 5), dtype=np.uint8) if masks else None, stream_index=i, task_id=1 + i // 10,
    )


def test_fill_phase_keeps_everything():
    buf = ReplayBuffer(5)
    rng = np.random.default_rng(0)
    for i in range(5):
        reservoir_insert(buf, i, rng)
    assert buf.entries == [0, 1, 2, 3, 4] and buf.seen_count == 5


def test_insertion_at_capacity_retained_with_probability_b_over_b_plus_1():
    B, trials, kept = 4, 20_000, 0
    rng = np.random.default_rng(1)
    for _ in range(trials):
        buf = ReplayBuffer(B)
        buf.extend(range(B), rng)
        kept += buf.insert("new", rng) >= 0
    p = B / (B + 1)
    assert abs(kept / trials - p) < 4 * math.sqrt(p * (1 - p) / trials)


def test_size_invariant_and_monotone_count():
    buf, rng = ReplayBuffer(7), np.random.default_rng(2)
    last = 0
    for n in range(1, 60):
        if n % 3:
            buf.insert(n, rng)
        else:
            buf.extend([n, -n], rng)
        assert len(buf) == min(buf.seen_count, 7)
        assert buf.seen_count >= last
        last = buf.seen_count


def test_insert_and_extend_follow_the_same_law():
    # uniform inclusion via the scalar path, small Monte Carlo
    n, B, trials = 50, 5, 4000
    counts = np.zeros(n)
    rng = np.random.default_rng(3)
    for _ in range(trials):
        buf = ReplayBuffer(B)
        for i in range(n):
            buf.insert(i, rng)
        counts[buf.entries] += 1
    assert chisquare(counts).pvalue > 0.01
    assert counts.sum() == B * trials


def test_buffer_label_marginals_follow_stream():
    rng = np.random.default_rng(4)
    probs = np.array([0.4, 0.3, 0.15, 0.1, 0.05])
    labels = rng.choice(5, size=5000, p=probs)
    pooled = np.zeros(5)
    for t in range(300):
        buf = ReplayBuffer(100)
        buf.extend(labels.tolist(), np.random.default_rng(100 + t))
        pooled += np.bincount(buf.entries, minlength=5)
    expected = np.bincount(labels, minlength=5) / len(labels) * pooled.sum()
    assert chisquare(pooled, expected).pvalue > 0.01


def test_sampling_rules():
    buf, rng = ReplayBuffer(10), np.random.default_rng(5)
    buf.extend(range(10), rng)
    perm = buf.sample(10, np.random.default_rng(0))
    assert sorted(perm) == list(range(10))
    assert buf.sample(4, np.random.default_rng(9)) == buf.sample(4, np.random.default_rng(9))
    assert len(buf.sample(25, rng)) == 25  # with replacement
    assert ReplayBuffer(3).sample(4, rng) == []


def test_sample_batch_empty_and_stacked():
    rng = np.random.default_rng(6)
    assert sample_batch(ReplayBuffer(3), 2, rng) is None
    buf = ReplayBuffer(3)
    buf.extend([_entry(i) for i in range(3)], rng)
    batch = sample_batch(buf, 2, rng)
    assert batch.samples.shape == (2, 3, 2, 2) and batch.labels.shape == (2, 4)
    assert batch.masks.shape == (2, 2, 5) and len(batch) == 2


def test_entries_are_read_only():
    e = _entry(3)
    with pytest.raises(ValueError):
        e.sample[0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        BufferEntry(np.zeros(1), np.array([2]), np.zeros(1), None, 0, 1)


def test_snapshot_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    buf = ReplayBuffer(5)
    buf.extend([_entry(i) for i in range(12)], rng)
    buf.save(tmp_path / "b.npz", rng.bit_generator.state)
    back, state = ReplayBuffer.load(tmp_path / "b.npz")
    assert back.capacity == 5 and back.seen_count == 12
    assert [e.stream_index for e in back.entries] == [e.stream_index for e in buf.entries]
    for a, b in zip(back.entries, buf.entries):
        assert np.array_equal(a.sample, b.sample) and np.array_equal(a.logits, b.logits)
        assert np.array_equal(a.masks, b.masks) and a.task_id == b.task_id
    r2 = np.random.default_rng()
    r2.bit_generator.state = state
    assert r2.integers(0, 10**9) == rng.integers(0, 10**9)


class _Fixed(torch.nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = logits

    def forward(self, x):
        return self.logits.expand(x.shape[0], -1)


def _batch(labels, logits):
    labels = torch.tensor(labels, dtype=torch.float32)
    return ReplayBatch(torch.zeros(len(labels), 3, 2, 2), labels, torch.tensor(logits, dtype=torch.float32),
                       None, np.ones(len(labels), dtype=int))


def test_loss_er_examples():
    b = _batch([[1, 0, 0, 0, 0]], [[0.0] * 5])
    assert float(loss_er(_Fixed(torch.zeros(1, 5)), b, seen_classes=range(3))) == pytest.approx(math.log(2))
    sat = torch.tensor([[50.0, -50.0, -50.0, 0.0, 0.0]])
    assert float(loss_er(_Fixed(sat), b, seen_classes=range(3))) < 1e-12
    assert float(loss_er(_Fixed(sat), None, range(3))) == 0.0


def test_loss_der_examples():
    stored = [[0.5, -1.0, 2.0], [0.0, 0.0, 1.0]]
    b = _batch([[1, 0, 0], [0, 1, 0]], stored)
    same = torch.tensor(stored)
    assert float(loss_der(None, b, logits=same)) == 0.0
    assert float(loss_der(None, b, logits=same + 1)) == pytest.approx(1.0)
    assert float(loss_der(None, None)) == 0.0


def test_ace_masks():
    y = torch.zeros(3, 10)
    y[0, 3] = y[2, 7] = 1
    assert torch.nonzero(ace_class_mask(y, [], "stream")).flatten().tolist() == [3, 7]
    assert ace_class_mask(y, range(50), "buffer", num_classes=60).sum() == 50
    assert ace_class_mask(torch.zeros(4, 10), [1], "stream").sum() == 0
    assert torch.equal(seen_mask([], 3), torch.zeros(3))
    with pytest.raises(ValueError):
        ace_class_mask(y, [], "other")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 30), st.integers(0, 200), st.integers(0, 2**31 - 1))
def test_extend_never_exceeds_capacity(capacity, n, seed):
    buf = ReplayBuffer(capacity)
    buf.extend(range(n), np.random.default_rng(seed))
    assert len(buf) == min(n, capacity) and buf.seen_count == n
    assert len(set(buf.entries)) == len(buf)
