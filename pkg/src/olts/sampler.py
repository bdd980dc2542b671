"""Experimental design: draws the parameter vector λ for each simulation.

Draws are counter-based rather than sequential: λ for simulation i is a
pure function of (seed, i), so restarted clients and concurrent
launchers always agree on the assignment without coordination.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil

import numpy as np


@dataclass(frozen=True)
class UniformReal:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"UniformReal needs lo < hi, got [{self.lo}, {self.hi}]")

    def draw(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.lo, self.hi))


@dataclass(frozen=True)
class Normal:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"Normal needs std > 0, got {self.std}")

    def draw(self, rng: np.random.Generator) -> float:
        return float(self.mean + self.std * rng.standard_normal())


@dataclass(frozen=True)
class DiscreteSet:
    values: tuple

    def __post_init__(self):
        if len(self.values) == 0:
            raise ValueError("DiscreteSet needs at least one value")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    def draw(self, rng: np.random.Generator) -> float:
        return float(self.values[int(rng.integers(0, len(self.values)))])


@dataclass(frozen=True)
class Fixed:
    value: float

    def draw(self, rng: np.random.Generator) -> float:
        return float(self.value)


@dataclass(frozen=True)
class ParamSpace:
    """Ordered list of (name, distribution) entries defining λ."""

    entries: tuple

    def __post_init__(self):
        names = [name for name, _ in self.entries]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in {names}")
        object.__setattr__(self, "entries", tuple(self.entries))

    @property
    def names(self) -> tuple:
        return tuple(name for name, _ in self.entries)

    def index_of(self, name: str) -> int:
        return self.names.index(name)


@dataclass(eq=False)
class ParamVector:
    """One λ: named real parameters defining a simulation instance."""

    names: tuple
    values: np.ndarray

    def __post_init__(self):
        self.names = tuple(self.names)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if len(self.names) != len(self.values):
            raise ValueError("names/values length mismatch")

    def __eq__(self, other):
        return (
            isinstance(other, ParamVector)
            and self.names == other.names
            and self.values.tobytes() == other.values.tobytes()
        )

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def as_dict(self) -> dict:
        return {n: float(v) for n, v in zip(self.names, self.values)}

    def select(self, names) -> np.ndarray:
        return np.array([self[n] for n in names], dtype=np.float64)


@dataclass(frozen=True)
class MonteCarlo:
    seed: int


@dataclass(frozen=True)
class OrderedSweep:
    """Ascending sweep of one discrete axis; other axes stay Monte Carlo.

    Reproduces the streaming-bias setup where simulations run in
    increasing order of the swept parameter. ensemble_size fixes how
    many consecutive indices share each swept value.
    """

    axis_name: str
    ensemble_size: int
    seed: int = 0


def _rng_for(seed: int, index: int) -> np.random.Generator:
    # SeedSequence hashes the (seed, index) pair; no sequential state.
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def next_params(space: ParamSpace, strategy, index: int) -> ParamVector:
    """λ for simulation `index` under the given strategy. Pure."""
    if index < 0:
        raise ValueError(f"index must be non-negative, got {index}")
    rng = _rng_for(strategy.seed, index)
    swept = None
    if isinstance(strategy, OrderedSweep):
        swept = strategy.axis_name
        if swept not in space.names:
            raise ValueError(f"swept axis {swept!r} not in param space {space.names}")

    values = np.empty(len(space.entries), dtype=np.float64)
    for i, (name, dist) in enumerate(space.entries):
        if name == swept:
            if not isinstance(dist, DiscreteSet):
                raise ValueError(f"swept axis {name!r} must be a DiscreteSet")
            ordered = sorted(dist.values)
            repeats = ceil(strategy.ensemble_size / len(ordered))
            values[i] = ordered[min(index // repeats, len(ordered) - 1)]
        else:
            values[i] = dist.draw(rng)
    return ParamVector(space.names, values)
