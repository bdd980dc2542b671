import threading
from collections import Counter

import numpy as np
import pytest

from helpers import reservoir_inclusion_counts, run_read_once_exactness, tagged_sample
from olts.buffer import (
    Fifo,
    FullTrajectory,
    MemoryBuffer,
    ReadOnceRandom,
    ReservoirWeighted,
    StepPair,
)


def test_read_once_slot_exhaustion():
    buf = MemoryBuffer(ReadOnceRandom(watermark=1), capacity=4)
    assert all(buf.put(tagged_sample(i)) for i in range(4))
    assert buf.put(tagged_sample(4)) is False
    assert buf.occupancy().count == 4
    assert buf.backpressure_on_full


def test_fifo_eviction_and_order():
    buf = MemoryBuffer(Fifo(), capacity=2)
    for i in range(3):
        assert buf.put(tagged_sample(i))
    batch = buf.try_get_batch(2, np.random.default_rng(0))
    assert [s.sim_id for s in batch.samples] == [1, 2]
    assert not buf.backpressure_on_full


def test_fifo_not_ready_below_batch_size():
    buf = MemoryBuffer(Fifo(), capacity=8)
    buf.put(tagged_sample(0))
    assert buf.try_get_batch(2) is None


def test_watermark_gating():
    buf = MemoryBuffer(ReadOnceRandom(watermark=8), capacity=16)
    for i in range(5):
        buf.put(tagged_sample(i))
    assert buf.try_get_batch(2) is None  # 5 < watermark 8

    buf = MemoryBuffer(ReadOnceRandom(watermark=2), capacity=16)
    for i in range(4):
        buf.put(tagged_sample(i))
    batch = buf.try_get_batch(2)
    assert batch is not None
    assert len({s.sim_id for s in batch.samples}) == 2  # distinct slots
    assert buf.occupancy().count == 2


def test_occupancy_accounting():
    buf = MemoryBuffer(ReadOnceRandom(watermark=1), capacity=16)
    occ = buf.occupancy()
    assert (occ.count, occ.capacity, occ.free) == (0, 16, 16)
    for i in range(3):
        buf.put(tagged_sample(i))
    occ = buf.occupancy()
    assert (occ.count, occ.capacity, occ.free) == (3, 16, 13)
    buf.try_get_batch(2)
    occ = buf.occupancy()
    assert (occ.count, occ.capacity, occ.free) == (1, 16, 15)


def test_read_once_exactness_randomized():
    for seed in range(20):
        out = run_read_once_exactness(seed, n_ops=400)
        assert out["watermark_ok"], f"seed {seed}"
        assert Counter(out["batched"] + out["residual"]) == Counter(out["inserted"]), f"seed {seed}"
        assert max(Counter(out["batched"]).values(), default=1) == 1, f"seed {seed}"


def test_determinism_same_seed_same_batches():
    def run():
        buf = MemoryBuffer(ReadOnceRandom(watermark=2), capacity=32, seed=99)
        ids = []
        for i in range(100):
            buf.put(tagged_sample(i))
            if i % 3 == 2:
                b = buf.try_get_batch(2)
                if b:
                    ids.append(tuple(s.sim_id for s in b.samples))
        return ids

    assert run() == run()


def test_reservoir_uniformity_smoke():
    from scipy import stats

    k, n, trials = 8, 64, 4000
    counts = reservoir_inclusion_counts(k, n, trials, seed=1234)
    expected = trials * k / n
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    p = stats.chi2.sf(chi2, df=n - 1)
    assert p > 0.001, f"chi2={chi2:.1f} p={p:.4g}"


def test_reservoir_weights_bias_retention():
    rng = np.random.default_rng(7)
    heavy_kept = light_kept = 0
    for trial in range(800):
        buf = MemoryBuffer(ReservoirWeighted(), capacity=8, seed=trial)
        for tag in range(64):
            buf.put(tagged_sample(tag), weight=4.0 if tag % 2 == 0 else 1.0)
        for s in buf.drain_remainder():
            if s.sim_id % 2 == 0:
                heavy_kept += 1
            else:
                light_kept += 1
    assert heavy_kept > 2.0 * light_kept


def test_reservoir_read_without_removal():
    buf = MemoryBuffer(ReservoirWeighted(), capacity=8, seed=3)
    for tag in range(8):
        buf.put(tagged_sample(tag))
    batch = buf.try_get_batch(8, np.random.default_rng(0))
    assert sorted(s.sim_id for s in batch.samples) == list(range(8))
    assert buf.occupancy().count == 8
    assert buf.try_get_batch(3) is not None  # still resident


def test_reservoir_not_ready_below_batch():
    buf = MemoryBuffer(ReservoirWeighted(), capacity=8, seed=3)
    buf.put(tagged_sample(0))
    assert buf.try_get_batch(2) is None


def test_unit_shape_validation():
    with pytest.raises(ValueError):
        StepPair(0, np.zeros((3, 4)))
    with pytest.raises(ValueError):
        FullTrajectory(np.zeros(5))
    assert FullTrajectory(np.zeros((5, 2))).t_count == 5


def test_constructor_validation():
    with pytest.raises(ValueError):
        MemoryBuffer(Fifo(), capacity=0)
    with pytest.raises(ValueError):
        MemoryBuffer(ReadOnceRandom(watermark=9), capacity=8)
    buf = MemoryBuffer(Fifo(), capacity=2)
    with pytest.raises(ValueError):
        buf.put(tagged_sample(0), weight=0.0)
    with pytest.raises(ValueError):
        buf.try_get_batch(0)


def test_mpsc_concurrent_exactness():
    buf = MemoryBuffer(ReadOnceRandom(watermark=4), capacity=64, seed=5)
    n_producers, per_producer = 4, 500
    batched = []
    stop = threading.Event()

    def produce(base):
        for i in range(per_producer):
            tag = base * per_producer + i
            while not buf.put(tagged_sample(tag)):
                buf.wait_for_space(0.05)

    def consume():
        rng = np.random.default_rng(11)
        while not stop.is_set() or buf.occupancy().count > 0:
            b = buf.try_get_batch(4, rng)
            if b is None:
                buf.wait_for_change(0.01)
            else:
                batched.extend(s.sim_id for s in b.samples)

    threads = [threading.Thread(target=produce, args=(k,)) for k in range(n_producers)]
    consumer = threading.Thread(target=consume)
    consumer.start()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    stop.set()
    consumer.join()
    batched.extend(s.sim_id for s in buf.drain_remainder())
    assert Counter(batched) == Counter(range(n_producers * per_producer))
