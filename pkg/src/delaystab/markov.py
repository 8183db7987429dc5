"""Continuous-time Markov chains for the switching signal.

Paths are simulated exactly through the embedded chain: the holding time
in mode ``i`` is exponential with rate ``-gamma_ii`` and the next mode is
drawn from the off-diagonal rates. This keeps the switching signal
correct independently of any integrator step size. Paths are generated
for the whole horizon up front and then queried at grid times, so the
chain's randomness never interleaves with the Brownian stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from .core import check_mode

__all__ = [
    "GeneratorMatrix",
    "ModePath",
    "simulate_mode_path",
    "stationary_distribution",
    "validate_generator",
]

#: absolute tolerance on generator row sums
ROW_SUM_TOL = 1e-12


@dataclass(frozen=True)
class GeneratorMatrix:
    """Validated generator of a continuous-time Markov chain (rates, 1/time)."""

    entries: np.ndarray

    @property
    def n_modes(self) -> int:
        return self.entries.shape[0]

    def rate_out(self, mode: int) -> float:
        """Total jump rate out of a 1-based mode."""
        i = check_mode(mode, self.n_modes) - 1
        return -float(self.entries[i, i])


def validate_generator(entries) -> GeneratorMatrix:
    """Validate rates and return an immutable :class:`GeneratorMatrix`.

    Off-diagonal entries must be nonnegative and every row must sum to
    zero within ``ROW_SUM_TOL`` absolute.
    """
    arr = np.array(entries, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
        raise ValueError(f"generator must be a square matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("generator has non-finite entries")
    n = arr.shape[0]
    off = arr[~np.eye(n, dtype=bool)]
    if off.size and off.min() < 0.0:
        raise ValueError("generator has a negative off-diagonal rate")
    rows = arr.sum(axis=1)
    bad = np.nonzero(np.abs(rows) > ROW_SUM_TOL)[0]
    if bad.size:
        raise ValueError(
            f"generator row {bad[0] + 1} sums to {rows[bad[0]]:.3e}, expected 0"
        )
    arr = arr.copy()
    arr.setflags(write=False)
    return GeneratorMatrix(arr)


@dataclass(frozen=True)
class ModePath:
    """A right-continuous piecewise-constant mode trajectory on [0, horizon].

    ``modes[0]`` holds on ``[0, jump_times[0])``, ``modes[k]`` on
    ``[jump_times[k-1], jump_times[k])`` and the final mode up to the
    horizon. Consecutive modes always differ.
    """

    jump_times: np.ndarray
    modes: np.ndarray
    initial_mode: int
    horizon: float

    def __post_init__(self) -> None:
        jt = np.asarray(self.jump_times, dtype=np.float64)
        md = np.asarray(self.modes, dtype=np.int64)
        if md.size != jt.size + 1:
            raise ValueError("need one mode per inter-jump interval")
        if jt.size and (np.any(np.diff(jt) <= 0.0) or jt[0] <= 0.0 or jt[-1] > self.horizon):
            raise ValueError("jump times must be strictly increasing within (0, horizon]")
        if np.any(md[1:] == md[:-1]):
            raise ValueError("consecutive modes must differ")
        if md[0] != self.initial_mode:
            raise ValueError("first mode must equal initial_mode")
        jt.setflags(write=False)
        md.setflags(write=False)
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "modes", md)

    @property
    def n_jumps(self) -> int:
        return int(self.jump_times.size)

    def at(self, times) -> np.ndarray:
        """Right-continuous mode values at the query times (1-based)."""
        t = np.asarray(times, dtype=np.float64)
        idx = np.searchsorted(self.jump_times, t, side="right")
        return self.modes[idx]

    def occupation_fractions(self, n_modes: int) -> np.ndarray:
        """Fraction of [0, horizon] spent in each mode."""
        edges = np.concatenate(([0.0], self.jump_times, [self.horizon]))
        lengths = np.diff(edges)
        frac = np.zeros(n_modes)
        np.add.at(frac, self.modes - 1, lengths)
        return frac / self.horizon


def simulate_mode_path(
    gen: GeneratorMatrix, r0: int, horizon: float, rng: np.random.Generator
) -> ModePath:
    """Exact embedded-chain simulation of the switching signal.

    Holding times are inverse-CDF exponentials and the successor mode is
    drawn by cumulative scan over the off-diagonal rates, so a given
    generator, seed and horizon reproduce the path bit-identically.
    """
    if horizon <= 0.0:
        raise ValueError("horizon must be > 0")
    n = gen.n_modes
    current = check_mode(r0, n) - 1
    q = gen.entries
    t = 0.0
    jump_times = []
    modes = [current + 1]
    while True:
        rate = -q[current, current]
        if rate <= 0.0:
            break  # absorbing mode
        t += -math.log(1.0 - rng.random()) / rate
        if t > horizon:
            break
        v = rng.random() * rate
        acc = 0.0
        nxt = current
        for j in range(n):
            if j == current:
                continue
            acc += q[current, j]
            if v < acc:
                nxt = j
                break
        else:  # guard against accumulated rounding at v ~ rate
            nxt = max(j for j in range(n) if j != current and q[current, j] > 0.0)
        jump_times.append(t)
        modes.append(nxt + 1)
        current = nxt
    return ModePath(np.array(jump_times), np.array(modes, dtype=np.int64), modes[0], horizon)


def stationary_distribution(gen: GeneratorMatrix) -> np.ndarray:
    """Solve ``pi @ Gamma = 0`` with ``sum(pi) = 1`` for an irreducible chain.

    Raises ``ValueError`` for reducible generators or when the linear
    solve leaves a residual above 1e-12.
    """
    n = gen.n_modes
    if n == 1:
        return np.array([1.0])
    support = (gen.entries > 0.0) & ~np.eye(n, dtype=bool)
    n_comp, _ = connected_components(support.astype(np.int8), directed=True, connection="strong")
    if n_comp != 1:
        raise ValueError("chain is reducible; no unique stationary distribution")
    a = np.vstack([gen.entries.T, np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, b, rcond=None)
    residual = float(np.max(np.abs(pi @ gen.entries)))
    if residual > 1e-12 or np.any(pi <= 0.0) or abs(pi.sum() - 1.0) > 1e-12:
        raise ValueError(f"stationary solve failed (residual {residual:.3e})")
    return pi
