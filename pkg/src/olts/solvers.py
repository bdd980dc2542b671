"""Deterministic data generators: 2-D heat, Lorenz system, 1-D advection.

Each solver is parameterized by a small vector of named reals (its λ)
and iterates a fixed-step scheme, emitting the full state after every
step. Heat uses implicit Euler (unconditionally stable) with a
matrix-free conjugate-gradient solve; Lorenz uses explicit Euler;
advection uses first-order upwind on a periodic grid.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np


class SolverFailure(Exception):
    """Linear solver failed to converge (should be unreachable: SPD system)."""


class DivergenceError(Exception):
    """Trajectory produced a non-finite state."""


# ---------------------------------------------------------------------------
# 2-D heat equation, du/dt = alpha * (u_xx + u_yy), Dirichlet box.


@dataclass(frozen=True)
class HeatParams:
    t_ic: float
    t_x1: float
    t_x2: float
    t_y1: float
    t_y2: float
    alpha: float = 1.0
    n: int = 100
    dt: float = 0.01
    t_total: float = 1.0
    length: float = 1.0

    def __post_init__(self):
        if self.n < 3 or self.dt <= 0 or self.alpha <= 0:
            raise ValueError(f"invalid heat parameters: n={self.n} dt={self.dt} alpha={self.alpha}")


@dataclass(eq=False)
class HeatState:
    grid: np.ndarray  # (n, n), row index = y, column index = x
    t_index: int


def heat_init(p: HeatParams) -> HeatState:
    grid = np.full((p.n, p.n), float(p.t_ic))
    _set_boundary(grid, p)
    return HeatState(grid, 0)


def _set_boundary(grid: np.ndarray, p: HeatParams) -> None:
    # x edges first, y edges second: the four corners belong to the y rows.
    grid[:, 0] = p.t_x1
    grid[:, -1] = p.t_x2
    grid[0, :] = p.t_y1
    grid[-1, :] = p.t_y2


def _laplace_neighbor_sum(v: np.ndarray) -> np.ndarray:
    """Sum of the 4 neighbors with zero beyond the block edge."""
    out = np.zeros_like(v)
    out[1:, :] += v[:-1, :]
    out[:-1, :] += v[1:, :]
    out[:, 1:] += v[:, :-1]
    out[:, :-1] += v[:, 1:]
    return out


def _cg(apply_a, b: np.ndarray, x0: np.ndarray, rtol: float, maxiter: int) -> np.ndarray:
    """Conjugate gradient on arrays of any shape, matrix-free."""
    x = x0.copy()
    r = b - apply_a(x)
    bnorm = float(np.sqrt(np.vdot(b, b).real))
    if bnorm == 0.0:
        bnorm = 1.0
    if float(np.sqrt(np.vdot(r, r).real)) <= rtol * bnorm:
        return x
    p = r.copy()
    rs = float(np.vdot(r, r).real)
    for _ in range(maxiter):
        ap = apply_a(p)
        alpha = rs / float(np.vdot(p, ap).real)
        x += alpha * p
        r -= alpha * ap
        rs_new = float(np.vdot(r, r).real)
        if np.sqrt(rs_new) <= rtol * bnorm:
            return x
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise SolverFailure(f"no convergence in {maxiter} iterations")


def heat_step(state: HeatState, p: HeatParams) -> HeatState:
    """One implicit Euler step: (I - alpha*dt*L_h) u_new = u_old.

    The interior system is solved matrix-free by CG, warm-started from
    the previous interior (the residual is already zero at a uniform
    fixed point, so uniform fields reproduce bitwise).
    """
    dx = p.length / (p.n - 1)
    r = p.alpha * p.dt / (dx * dx)
    u = state.grid

    def apply_a(v):
        return (1.0 + 4.0 * r) * v - r * _laplace_neighbor_sum(v)

    b = u[1:-1, 1:-1].copy()
    b[0, :] += r * u[0, 1:-1]
    b[-1, :] += r * u[-1, 1:-1]
    b[:, 0] += r * u[1:-1, 0]
    b[:, -1] += r * u[1:-1, -1]

    interior = _cg(apply_a, b, u[1:-1, 1:-1].copy(), rtol=1e-12, maxiter=10 * p.n * p.n)
    new = np.empty_like(u)
    new[1:-1, 1:-1] = interior
    _set_boundary(new, p)
    return HeatState(new, state.t_index + 1)


def heat_steady_state(p: HeatParams, residual: float = 1e-12, maxiter: int = 2_000_000) -> np.ndarray:
    """Steady solution of the same discrete Laplace problem, by Jacobi.

    Deliberately shares no code with heat_step beyond the boundary
    assembly: it serves as the independent long-run oracle.
    """
    grid = np.full((p.n, p.n), float(p.t_ic))
    _set_boundary(grid, p)
    for _ in range(maxiter):
        avg = (grid[:-2, 1:-1] + grid[2:, 1:-1] + grid[1:-1, :-2] + grid[1:-1, 2:]) / 4.0
        # Absolute residual: |u - mean(neighbors)| bounds the solution
        # error by ~1/lambda_min of the scaled Laplacian, far below it.
        res = float(np.abs(avg - grid[1:-1, 1:-1]).max())
        grid[1:-1, 1:-1] = avg
        if res <= residual:
            return grid
    raise SolverFailure(f"Jacobi did not reach residual {residual}")


# ---------------------------------------------------------------------------
# Lorenz system, explicit Euler.


@dataclass(frozen=True)
class LorenzParams:
    rho: float
    x0: float
    y0: float
    z0: float
    sigma: float = 10.0
    beta: float = 8.0 / 3.0
    dt: float = 0.01
    t_total: float = 20.0
    # "as_printed" keeps dx/dt = sigma*(y - z), the variant that appears in
    # some write-ups; "standard" is the classical sigma*(y - x).
    variant: str = "standard"

    def __post_init__(self):
        if self.variant not in ("standard", "as_printed"):
            raise ValueError(f"unknown lorenz variant {self.variant!r}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


def lorenz_step(pos, p: LorenzParams):
    x, y, z = float(pos[0]), float(pos[1]), float(pos[2])
    if p.variant == "standard":
        dx = p.sigma * (y - x)
    else:
        dx = p.sigma * (y - z)
    dy = x * (p.rho - z) - y
    dz = x * y - p.beta * z
    nxt = (x + p.dt * dx, y + p.dt * dy, z + p.dt * dz)
    if not all(np.isfinite(v) for v in nxt):
        raise DivergenceError(f"non-finite state after step from ({x}, {y}, {z})")
    return nxt


def lorenz_init_from_seed(seed: int):
    """Initial position for clients given only a seed: approx N(15, 30).

    Uses SplitMix64 plus an Irwin-Hall(12) normal approximation so the
    result is a pure sequence of integer ops and IEEE-754 add/mul,
    reproducible bit-for-bit in any language (see docs/client-api.md).
    """
    mask = (1 << 64) - 1
    s = int(seed) & mask
    out = []
    for _ in range(3):
        total = 0.0
        for _ in range(12):
            s = (s + 0x9E3779B97F4A7C15) & mask
            z = s
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
            z = z ^ (z >> 31)
            total += (z >> 11) * 2.0**-53
        out.append(15.0 + 30.0 * (total - 6.0))
    return tuple(out)


# ---------------------------------------------------------------------------
# 1-D linear advection, first-order upwind, periodic.


@dataclass(eq=False)
class AdvectionParams:
    beta: float
    u0: np.ndarray
    dt: float
    t_total: float
    length: float = 1.0

    def __post_init__(self):
        self.u0 = np.asarray(self.u0, dtype=np.float64).reshape(-1)
        if not np.isfinite(self.beta):
            raise ValueError("beta must be finite")
        if len(self.u0) < 2:
            raise ValueError("profile needs at least 2 points")

    @property
    def n(self) -> int:
        return len(self.u0)

    @property
    def cfl(self) -> float:
        return abs(self.beta) * self.dt * self.n / self.length


def advect_step(u: np.ndarray, p: AdvectionParams) -> np.ndarray:
    c = p.beta * p.dt * p.n / p.length
    # Written as a convex combination so c == 1 is an exact circular shift.
    if p.beta >= 0:
        return (1.0 - c) * u + c * np.roll(u, 1)
    c = -c
    return (1.0 - c) * u + c * np.roll(u, -1)


def advection_profile(n: int, seed: int) -> np.ndarray:
    """Smooth periodic initial profile: a few random sinusoidal modes."""
    rng = np.random.default_rng(seed)
    x = np.arange(n) / n
    u = np.full(n, 1.0)
    for k in range(1, 5):
        amp = rng.uniform(0.1, 1.0) / k
        phase = rng.uniform(0.0, 2.0 * np.pi)
        u += amp * np.sin(2.0 * np.pi * k * x + phase)
    return u


# ---------------------------------------------------------------------------
# Trajectory runner shared by all clients.


@dataclass
class TrajectorySummary:
    steps_emitted: int
    wall_time: float


def run_trajectory(kind: str, params, sink) -> TrajectorySummary:
    """Iterate a solver, invoking sink(t_index, flat_field) after every
    step including the t=0 initial condition."""
    if kind not in ("heat", "lorenz", "advection"):
        raise ValueError(f"unknown solver kind {kind!r}")
    start = time.monotonic()
    steps = int(round(params.t_total / params.dt))
    if kind == "heat":
        state = heat_init(params)
        sink(0, state.grid.ravel().copy())
        for k in range(1, steps + 1):
            state = heat_step(state, params)
            sink(k, state.grid.ravel().copy())
    elif kind == "lorenz":
        pos = (params.x0, params.y0, params.z0)
        sink(0, np.array(pos))
        for k in range(1, steps + 1):
            pos = lorenz_step(pos, params)
            sink(k, np.array(pos))
    elif kind == "advection":
        u = params.u0.copy()
        sink(0, u.copy())
        for k in range(1, steps + 1):
            u = advect_step(u, params)
            sink(k, u.copy())
    return TrajectorySummary(steps + 1, time.monotonic() - start)
