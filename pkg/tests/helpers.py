"""Shared generators and harnesses for randomized tests."""

import math

import numpy as np

from olts import wire
from olts.buffer import MemoryBuffer, ReadOnceRandom, Sample, SingleStep
from olts.sampler import ParamVector

_SPECIALS = np.array([0.0, -0.0, 1.0, -1.0, math.inf, -math.inf, math.nan, 1e-300, 1e300])


def random_f64_array(rng: np.random.Generator, max_len: int = 64) -> np.ndarray:
    n = int(rng.integers(0, max_len + 1))
    vals = rng.standard_normal(n) * 10.0 ** rng.integers(-3, 4, size=n)
    # Sprinkle in non-finite and denormal-ish values; the codec must be
    # bit-transparent for every IEEE-754 payload.
    mask = rng.random(n) < 0.1
    vals[mask] = rng.choice(_SPECIALS, size=int(mask.sum()))
    return vals


def random_message(rng: np.random.Generator):
    kind = int(rng.integers(1, 8))
    u64 = lambda: int(rng.integers(0, 2**63))
    u32 = lambda: int(rng.integers(0, 2**32))
    if kind == wire.MSG_HELLO:
        rank = int(rng.integers(0, 4))
        shape = tuple(int(d) for d in rng.integers(1, 64, size=rank))
        return wire.Hello(u64(), u64(), random_f64_array(rng), shape)
    if kind == wire.MSG_TIMESTEP:
        return wire.Timestep(u64(), u32(), random_f64_array(rng))
    if kind == wire.MSG_BYE:
        return wire.Bye(u64(), u32())
    if kind == wire.MSG_HEARTBEAT:
        return wire.Heartbeat(u64(), u64())
    if kind == wire.MSG_PARAM_REQUEST:
        return wire.ParamRequest(u32())
    if kind == wire.MSG_PARAM_ASSIGN:
        return wire.ParamAssign(u64(), random_f64_array(rng))
    return wire.Ack(int(rng.integers(0, 2**16)))


def tagged_sample(tag: int) -> Sample:
    return Sample(tag, ParamVector(("p",), [float(tag)]), SingleStep(0, [float(tag)]))


def run_read_once_exactness(seed: int, n_ops: int = 1000):
    """Randomized put/get interleaving against a ReadOnceRandom buffer.

    Returns the bookkeeping needed to check the two load-bearing
    properties: every accepted sample is batched exactly once over the
    buffer lifetime, and no batch ever forms below the watermark.
    """
    rng = np.random.default_rng(seed)
    capacity = int(rng.integers(4, 64))
    watermark = int(rng.integers(1, capacity + 1))
    buf = MemoryBuffer(ReadOnceRandom(watermark), capacity, seed=seed + 1)
    inserted, batched, rejected = [], [], 0
    watermark_ok = True
    next_tag = 0
    for _ in range(n_ops):
        if rng.random() < 0.55:
            ok = buf.put(tagged_sample(next_tag))
            if ok:
                inserted.append(next_tag)
            else:
                rejected += 1
            next_tag += 1
        else:
            batch_size = int(rng.integers(1, max(2, capacity // 2)))
            before = buf.occupancy().count
            batch = buf.try_get_batch(batch_size, rng)
            if batch is not None:
                if before < max(watermark, batch_size):
                    watermark_ok = False
                batched.extend(s.sim_id for s in batch.samples)
    residual = [s.sim_id for s in buf.drain_remainder()]
    return {
        "inserted": inserted,
        "batched": batched,
        "residual": residual,
        "rejected": rejected,
        "watermark_ok": watermark_ok,
    }


def gradient_check_case(seed: int, activation: str) -> float:
    """Max safeguarded relative error between analytic gradients and
    central finite differences (h = 1e-6) on one random small net.

    Central differences only define the derivative away from the ReLU
    kink, so biases are randomized (zero-init puts dead rows exactly at
    z=0) and inputs are redrawn until every pre-activation clears the
    kink by a margin much larger than h."""
    from olts.trainer import backward, init_mlp

    rng = np.random.default_rng(seed)
    n_hidden = int(rng.integers(1, 3))
    dims = [int(rng.integers(2, 9))]
    dims += [int(rng.integers(2, 9)) for _ in range(n_hidden)]
    dims.append(int(rng.integers(1, 9)))
    model = init_mlp(dims, activation, rng)
    for b in model.biases:
        b += 0.5 * rng.standard_normal(b.shape)
    batch = int(rng.integers(1, 5))

    def min_preactivation(x):
        a = x
        worst = np.inf
        for i, (w, b) in enumerate(zip(model.weights, model.biases)):
            z = a @ w.T + b
            if i < len(model.weights) - 1:
                worst = min(worst, float(np.abs(z).min()))
                a = np.maximum(z, 0.0) if activation == "relu" else z / (1.0 + np.exp(-z))
        return worst

    for _ in range(100):
        x = rng.standard_normal((batch, dims[0]))
        if activation != "relu" or min_preactivation(x) > 1e-4:
            break
    y = rng.standard_normal((batch, dims[-1]))

    grads, _ = backward(model, x, y)
    h = 1e-6
    worst = 0.0
    for key, tensors in (("weights", model.weights), ("biases", model.biases)):
        for li, tensor in enumerate(tensors):
            flat = tensor.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                _, lp = backward(model, x, y)
                flat[i] = orig - h
                _, lm = backward(model, x, y)
                flat[i] = orig
                fd = (lp - lm) / (2.0 * h)
                an = grads[key][li].reshape(-1)[i]
                # The floor sits above the FD noise (~eps*loss/h = 2e-10):
                # components below it are effectively checked absolutely.
                denom = max(abs(an), abs(fd), 1e-4)
                worst = max(worst, abs(an - fd) / denom)
    return worst


def reservoir_inclusion_counts(k: int, n: int, trials: int, seed: int) -> np.ndarray:
    """How often each stream position survives a unit-weight reservoir."""
    from olts.buffer import MemoryBuffer as MB, ReservoirWeighted

    counts = np.zeros(n, dtype=np.int64)
    for trial in range(trials):
        buf = MB(ReservoirWeighted(), k, seed=seed + trial)
        for tag in range(n):
            buf.put(tagged_sample(tag))
        for s in buf.drain_remainder():
            counts[s.sim_id] += 1
    return counts
