"""Surrogate model and optimization: explicit-tensor MLP, manual backprop,
SGD with exponential learning-rate decay, direct and autoregressive modes.

Everything is float64. The backward pass is hand-derived and checked
against central finite differences in the test suite, so the model stays
a plain pair of (W, b) lists with no autodiff dependency.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .buffer import Batch, FullTrajectory, SingleStep, StepPair


class TrainingDiverged(Exception):
    """Non-finite parameter after an update."""


class CorruptCheckpoint(Exception):
    pass


# ---------------------------------------------------------------------------
# Model.

_ACT_CODES = {"relu": 0, "silu": 1}


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z * _sigmoid(z)


def _act_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


@dataclass(eq=False)
class Mlp:
    weights: list  # W_l of shape (out, in)
    biases: list   # b_l of shape (out,)
    activation: str  # hidden layers only; output layer is linear

    def __post_init__(self):
        if self.activation not in _ACT_CODES:
            raise ValueError(f"unknown activation {self.activation!r}")
        for w, b in zip(self.weights, self.biases):
            if w.shape[0] != b.shape[0]:
                raise ValueError(f"layer shape mismatch: W{w.shape} b{b.shape}")
        for prev, nxt in zip(self.weights, self.weights[1:]):
            if nxt.shape[1] != prev.shape[0]:
                raise ValueError(f"layer chain broken: {prev.shape} -> {nxt.shape}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_dims(self) -> tuple:
        return (self.in_dim,) + tuple(w.shape[0] for w in self.weights)


def init_mlp(layer_dims, activation: str, rng: np.random.Generator) -> Mlp:
    """He-initialized MLP; layer_dims = (in, hidden..., out)."""
    weights, biases = [], []
    for d_in, d_out in zip(layer_dims, layer_dims[1:]):
        weights.append(rng.standard_normal((d_out, d_in)) * np.sqrt(2.0 / d_in))
        biases.append(np.zeros(d_out))
    return Mlp(weights, biases, activation)


def forward(model: Mlp, x: np.ndarray) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        a = z if i == last else _act(z, model.activation)
    return a[0] if single else a


def backward(model: Mlp, x: np.ndarray, target: np.ndarray):
    """MSE loss and exact gradients, mean-reduced over batch and outputs.

    Returns ({"weights": [...], "biases": [...]}, loss).
    """
    a = np.asarray(x, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if a.ndim == 1:
        a, y = a[None, :], y[None, :]
    # overflow here is not an error condition: it produces the non-finite
    # weights that sgd_step turns into TrainingDiverged
    with np.errstate(over="ignore", invalid="ignore"):
        acts = [a]
        zs = []
        last = len(model.weights) - 1
        for i, (w, b) in enumerate(zip(model.weights, model.biases)):
            z = acts[-1] @ w.T + b
            zs.append(z)
            acts.append(z if i == last else _act(z, model.activation))
        err = acts[-1] - y
        n = err.size
        loss = float(np.mean(err * err))
        delta = (2.0 / n) * err
        grads_w = [None] * len(model.weights)
        grads_b = [None] * len(model.weights)
        for i in range(last, -1, -1):
            grads_w[i] = delta.T @ acts[i]
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ model.weights[i]) * _act_grad(zs[i - 1], model.activation)
    return {"weights": grads_w, "biases": grads_b}, loss


@dataclass(frozen=True)
class SgdConfig:
    lr0: float = 1e-3
    decay_gamma: float = 0.99995
    batch_size: int = 64
    max_batches: int = 10_000

    def __post_init__(self):
        if not 0.0 < self.decay_gamma <= 1.0:
            raise ValueError(f"decay_gamma must be in (0, 1], got {self.decay_gamma}")

    def lr(self, step_index: int) -> float:
        return self.lr0 * self.decay_gamma**step_index


def sgd_step(model: Mlp, grads, step_index: int, cfg: SgdConfig) -> Mlp:
    lr = cfg.lr(step_index)
    for w, gw in zip(model.weights, grads["weights"]):
        w -= lr * gw
    for b, gb in zip(model.biases, grads["biases"]):
        b -= lr * gb
    for w in model.weights:
        if not np.isfinite(w).all():
            raise TrainingDiverged(f"non-finite weight at step {step_index}, lr={lr}")
    for b in model.biases:
        if not np.isfinite(b).all():
            raise TrainingDiverged(f"non-finite bias at step {step_index}, lr={lr}")
    return model


# ---------------------------------------------------------------------------
# Normalization.


@dataclass(frozen=True)
class MinMax:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError(f"MinMax needs hi > lo, got [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class Standardize:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"Standardize needs std > 0, got {self.std}")


@dataclass(frozen=True)
class Identity:
    pass


@dataclass(eq=False)
class Normalizer:
    """Affine per-feature map x -> (x - offset) / scale."""

    offset: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.offset = np.atleast_1d(np.asarray(self.offset, dtype=np.float64))
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        if np.any(self.scale <= 0):
            raise ValueError("scale must be strictly positive")

    @classmethod
    def from_features(cls, specs) -> "Normalizer":
        offset, scale = [], []
        for spec in specs:
            if isinstance(spec, MinMax):
                offset.append(spec.lo)
                scale.append(spec.hi - spec.lo)
            elif isinstance(spec, Standardize):
                offset.append(spec.mean)
                scale.append(spec.std)
            elif isinstance(spec, Identity):
                offset.append(0.0)
                scale.append(1.0)
            else:
                raise ValueError(f"unknown feature spec {spec!r}")
        return cls(np.array(offset), np.array(scale))

    @classmethod
    def identity(cls, dim: int = 1) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def scalar(cls, spec) -> "Normalizer":
        return cls.from_features([spec])

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.offset) / self.scale

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.scale + self.offset


# ---------------------------------------------------------------------------
# Training modes: how a buffer sample becomes an (input, target) pair.


@dataclass(eq=False)
class Direct:
    """Predict u_t from (λ, t/t_total); wants SingleStep samples."""

    input_names: tuple
    steps_total: int
    target_norm: Optional[Normalizer] = None

    def input_dim(self, field_dim: int) -> int:
        return len(self.input_names) + 1


@dataclass(eq=False)
class Autoregressive:
    """Predict u_{t+1} from (λ_dynamic, u_t); wants StepPair samples.

    FullTrajectory samples contribute one random transition per draw,
    from a generator owned by the mode (deterministic for a fixed batch
    sequence)."""

    input_names: tuple
    pair_seed: int = 0
    target_norm: Optional[Normalizer] = None
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._rng = np.random.default_rng(self.pair_seed)

    def input_dim(self, field_dim: int) -> int:
        return len(self.input_names) + field_dim


def build_pairs(samples, mode):
    """Stack samples into (X, Y) matrices according to the mode."""
    xs, ys = [], []
    for s in samples:
        lam = s.params.select(mode.input_names)
        u = s.unit
        if isinstance(mode, Direct):
            if not isinstance(u, SingleStep):
                raise ValueError(f"Direct mode needs SingleStep samples, got {type(u).__name__}")
            t_norm = u.t_index / mode.steps_total
            xs.append(np.concatenate([lam, [t_norm]]))
            ys.append(u.field)
        else:
            if isinstance(u, StepPair):
                now, nxt = u.fields[0], u.fields[1]
            elif isinstance(u, FullTrajectory):
                t = int(mode._rng.integers(0, u.t_count - 1))
                now, nxt = u.fields[t], u.fields[t + 1]
            else:
                raise ValueError(
                    f"Autoregressive mode needs StepPair or FullTrajectory, got {type(u).__name__}"
                )
            xs.append(np.concatenate([lam, now]))
            ys.append(nxt)
    return np.array(xs), np.array(ys)


def train_on_batch(model: Mlp, batch: Batch, mode, normalizer: Normalizer,
                   cfg: SgdConfig, step: int) -> float:
    if not batch.samples:
        raise ValueError("empty batch")
    x, y = build_pairs(batch.samples, mode)
    if x.shape[1] != model.in_dim or y.shape[1] != model.out_dim:
        raise ValueError(
            f"batch dims ({x.shape[1]} -> {y.shape[1]}) do not match "
            f"model ({model.in_dim} -> {model.out_dim})"
        )
    xn = normalizer.transform(x)
    yn = mode.target_norm.transform(y) if mode.target_norm is not None else y
    grads, loss = backward(model, xn, yn)
    sgd_step(model, grads, step, cfg)
    return loss


def validate(model: Mlp, dataset, mode, normalizer: Normalizer, chunk: int = 1024) -> float:
    """RMSE over all (input, target) pairs, in raw target units."""
    if not dataset:
        raise ValueError("empty validation dataset")
    x, y = build_pairs(dataset, mode)
    xn = normalizer.transform(x)
    sq_sum, count = 0.0, 0
    for lo in range(0, len(xn), chunk):
        pred = forward(model, xn[lo : lo + chunk])
        if mode.target_norm is not None:
            pred = mode.target_norm.inverse(pred)
        err = pred - y[lo : lo + chunk]
        sq_sum += float(np.sum(err * err))
        count += err.size
    return float(np.sqrt(sq_sum / count))


def validation_loss(model: Mlp, dataset, mode, normalizer: Normalizer, chunk: int = 1024) -> float:
    """Mean squared error in normalized target units (train_loss scale)."""
    x, y = build_pairs(dataset, mode)
    xn = normalizer.transform(x)
    yn = mode.target_norm.transform(y) if mode.target_norm is not None else y
    sq_sum, count = 0.0, 0
    for lo in range(0, len(xn), chunk):
        err = forward(model, xn[lo : lo + chunk]) - yn[lo : lo + chunk]
        sq_sum += float(np.sum(err * err))
        count += err.size
    return sq_sum / count


# ---------------------------------------------------------------------------
# Checkpoints: magic "MLCK", fixed header, raw f64 parameters.

_CK_MAGIC = b"MLCK"
_CK_VERSION = 1


def checkpoint_save(model: Mlp, cfg, step: int, path) -> None:
    """cfg is accepted for interface stability; the format stores only
    what forward() needs plus the step counter."""
    dims = model.layer_dims
    head = _CK_MAGIC + struct.pack(
        "<HBBQI", _CK_VERSION, _ACT_CODES[model.activation], 0, step, len(model.weights)
    )
    head += b"".join(struct.pack("<II", w.shape[1], w.shape[0]) for w in model.weights)
    with open(path, "wb") as f:
        f.write(head)
        for w, b in zip(model.weights, model.biases):
            f.write(np.ascontiguousarray(w).tobytes())
            f.write(b.tobytes())


def checkpoint_load(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20 or blob[:4] != _CK_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic or truncated header")
    version, act_code, _, step, n_layers = struct.unpack_from("<HBBQI", blob, 4)
    if version != _CK_VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported version {version}")
    acts = {v: k for k, v in _ACT_CODES.items()}
    if act_code not in acts:
        raise CorruptCheckpoint(f"{path}: unknown activation code {act_code}")
    pos = 20
    shapes = []
    for _ in range(n_layers):
        if pos + 8 > len(blob):
            raise CorruptCheckpoint(f"{path}: truncated layer table")
        d_in, d_out = struct.unpack_from("<II", blob, pos)
        shapes.append((d_out, d_in))
        pos += 8
    weights, biases = [], []
    for d_out, d_in in shapes:
        need = 8 * (d_out * d_in + d_out)
        if pos + need > len(blob):
            raise CorruptCheckpoint(f"{path}: truncated parameters")
        w = np.frombuffer(blob, dtype="<f8", count=d_out * d_in, offset=pos).reshape(d_out, d_in)
        pos += 8 * d_out * d_in
        b = np.frombuffer(blob, dtype="<f8", count=d_out, offset=pos)
        pos += 8 * d_out
        weights.append(w.copy())
        biases.append(b.copy())
    if pos != len(blob):
        raise CorruptCheckpoint(f"{path}: {len(blob) - pos} trailing bytes")
    try:
        model = Mlp(weights, biases, acts[act_code])
    except ValueError as err:
        raise CorruptCheckpoint(f"{path}: {err}") from err
    return model, step


# ---------------------------------------------------------------------------
# Metrics CSV shared by the online server and the offline baseline.

METRICS_COLUMNS = ("step", "lr", "train_loss", "val_rmse", "val_loss", "epoch")


class MetricsWriter:
    """Appends one row per validation event; floats via repr so traces
    compare bitwise across runs."""

    def __init__(self, path):
        self.path = path
        self._file = open(path, "w")
        self._file.write(",".join(METRICS_COLUMNS) + "\n")
        self._file.flush()
        self.last_step = -1

    def append(self, step: int, lr: float, train_loss: float, val_rmse: float,
               val_loss: float, epoch: int = 0) -> None:
        if step <= self.last_step:
            raise ValueError(f"metrics steps must increase: {step} after {self.last_step}")
        self.last_step = step
        row = [str(step), repr(float(lr)), repr(float(train_loss)),
               repr(float(val_rmse)), repr(float(val_loss)), str(epoch)]
        self._file.write(",".join(row) + "\n")
        self._file.flush()

    def close(self) -> None:
        self._file.close()
