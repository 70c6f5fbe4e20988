import numpy as np
import pytest

from ssocl.errors import ContractError
from ssocl.memory import (MemoryBuffer, MemoryEntry, MenmConfig, class_quotas, enhance_memory, export_csv,
                          prediction_entropy, retain_lowest_entropy, sample_replay_batch, store_direct,
                          tempered_softmax)
from ssocl.model import ModelConfig, init_model


def entry(uid, label, h, step=0):
    return MemoryEntry(np.full((1, 1), float(uid)), label, h, step, uid)


def test_softmax_examples():
    np.testing.assert_allclose(tempered_softmax(np.zeros(4), 7.0), 0.25)
    np.testing.assert_allclose(tempered_softmax([2.0, 0.0], 2.0), [0.7311, 0.2689], atol=1e-4)
    p = tempered_softmax([5.0, -3.0, 1.0], 1e9)
    np.testing.assert_allclose(p, 1 / 3, atol=1e-8)
    with pytest.raises(ContractError):
        tempered_softmax([1.0], 0.0)


def test_entropy_examples():
    assert prediction_entropy(np.full(4, 0.25)) == pytest.approx(np.log(4))
    assert prediction_entropy([0.0, 1.0, 0.0]) == 0.0
    assert prediction_entropy([0.5, 0.5, 0.0, 0.0]) == pytest.approx(np.log(2))
    with pytest.raises(ContractError):
        prediction_entropy([0.5, 0.6])


def test_quota_remainder_goes_to_largest_classes():
    assert class_quotas(10, 4, [0, 5, 9, 1]).tolist() == [2, 3, 3, 2]
    assert class_quotas(200, 4, [1, 1, 1, 1]).tolist() == [50] * 4


def test_retention_example():
    pool = [entry(0, 0, 0.1), entry(1, 0, 0.9), entry(2, 0, 0.5), entry(3, 1, 0.3)]
    kept = retain_lowest_entropy(pool, 4, 2)
    assert sorted(e.entropy for e in kept if e.label == 0) == [0.1, 0.5]


def test_retention_ties_prefer_newer():
    pool = [entry(0, 0, 0.2, step=1), entry(1, 0, 0.2, step=5), entry(2, 0, 0.2, step=3)]
    kept = retain_lowest_entropy(pool, 4, 2)
    assert sorted(e.step for e in kept) == [3, 5]


@pytest.fixture(scope="module")
def model():
    return init_model(ModelConfig(channels=2, length=16, embed_dim=4, preset="custom", layers=[{"type": "flatten"}, {"type": "linear", "units": 4}]), 0)


def candidates(rng, n, k, start_uid, step):
    return [MemoryEntry(rng.normal(size=(2, 16)), int(rng.integers(k)), 0.0, step, start_uid + i) for i in range(n)]


def test_single_class_is_capped_by_quota(model):
    buf = MemoryBuffer(200, 2)
    enhance_memory(buf, [MemoryEntry(np.zeros((2, 16)) + i, 0, 0.0, 0, i) for i in range(300)], model, MenmConfig())
    assert buf.class_counts() == [100, 0]


def test_enhancement_idempotent(model):
    rng = np.random.default_rng(0)
    pool = candidates(rng, 40, 4, 0, 0)
    buf = MemoryBuffer(12, 4)
    enhance_memory(buf, pool, model, MenmConfig(capacity=12))
    first = [e.uid for e in buf.entries]
    enhance_memory(buf, pool, model, MenmConfig(capacity=12))
    assert [e.uid for e in buf.entries] == first


def test_store_direct_respects_capacity():
    buf = MemoryBuffer(3, 2)
    store_direct(buf, [entry(i, 0, 0.0) for i in range(5)])
    assert len(buf) == 3


def test_replay_sampling():
    buf = MemoryBuffer(20, 2, entries=[entry(i, i % 2, 0.0) for i in range(10)])
    assert len(sample_replay_batch(buf, 32, 0)) == 10
    assert sorted(e.uid for e in sample_replay_batch(buf, 10, 1)) == list(range(10))
    assert [e.uid for e in sample_replay_batch(buf, 4, 7)] == [e.uid for e in sample_replay_batch(buf, 4, 7)]
    assert sample_replay_batch(MemoryBuffer(5, 2), 3, 0) == []


@pytest.mark.parametrize("policy", ["entropy", "random", "reservoir"])
def test_randomized_operations_keep_invariants(model, policy):
    rng = np.random.default_rng(42)
    cap, k = 200, 4
    cfg = MenmConfig(capacity=cap)
    buf = MemoryBuffer(cap, k)
    uid = 0
    for op in range(300):
        if rng.random() < 0.6:
            cand = candidates(rng, int(rng.integers(1, 40)), k, uid, op)
            uid += len(cand)
            before = {e.uid: e for e in buf.entries}
            offered = before | {c.uid: c for c in cand}
            enhance_memory(buf, cand, model, cfg, policy=policy, rng=rng)
            if policy == "entropy":
                kept = {e.uid for e in buf.entries}
                for lab in range(k):
                    kept_h = [e.entropy for e in buf.entries if e.label == lab]
                    dropped = [e.entropy for u, e in offered.items() if u not in kept and e.label == lab]
                    if kept_h and dropped:
                        assert min(dropped) >= max(kept_h)
        else:
            sample_replay_batch(buf, int(rng.integers(1, 64)), rng)
        assert len(buf) <= cap
        assert all(0 <= e.label < k for e in buf.entries)
        assert len({e.uid for e in buf.entries}) == len(buf)


def test_export_csv(tmp_path):
    buf = MemoryBuffer(5, 2, entries=[entry(i, i % 2, 0.1 * i, step=i) for i in range(3)])
    export_csv(buf, np.arange(6.0).reshape(3, 2), tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "arrival_step,pseudo_label,entropy,embedding_0,embedding_1"
    assert len(lines) == 4
