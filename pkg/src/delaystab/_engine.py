"""Path-generation engine: per-path random streams, block stepping, batching.

Reproducibility contract: every path owns two independent substreams
derived from ``(master_seed, path_index, purpose)`` — purpose 0 for the
Brownian increments, 1 for the switching chain. Increments are consumed
strictly sequentially per path in blocks of bounded size, so results are
bit-identical regardless of batch size, worker count, backend, or where
the block boundaries fall. Restarting from a grid step replays the same
streams with the already-consumed prefix skipped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .core import HybridModel, InitialSegment
from .markov import GeneratorMatrix, ModePath, simulate_mode_path

__all__ = [
    "BatchResult",
    "MODE_CODES",
    "brownian_stream",
    "markov_stream",
    "run_paths",
]

MODE_CODES = {"uncontrolled": 0, "controlled": 1, "delayed": 2}

#: steps per increment block (bounds the increment buffer to ~16 MB per batch)
BLOCK_STEPS = 16384

#: paths advanced together by one kernel call
BATCH_PATHS = 128


def brownian_stream(master_seed: int, path_index: int) -> np.random.Generator:
    """The Gaussian-increment stream of one path."""
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(path_index, 0))
    return np.random.Generator(np.random.Philox(seq))


def markov_stream(master_seed: int, path_index: int) -> np.random.Generator:
    """The switching-chain stream of one path (never interleaved with the
    Brownian stream)."""
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(path_index, 1))
    return np.random.Generator(np.random.Philox(seq))


@dataclass
class BatchResult:
    """Recorded states and modes for a set of paths at shared record steps."""

    record_steps: np.ndarray  # (R,) grid indices
    states: np.ndarray  # (R, P, n), NaN at and after explosion
    modes: np.ndarray  # (R, P) 1-based
    exploded_step: np.ndarray  # (P,), -1 where the path stayed finite


def _mode_schedule(path: ModePath, h: float, n_steps: int):
    """Turn a jump path into (change_steps, change_modes) step schedules.

    Entry 0 is the initial mode at step 0; a jump at time ``s`` moves the
    mode for every grid step ``k`` with ``k*h >= s`` (right-continuity).
    """
    steps = [0]
    modes = [int(path.modes[0])]
    for s, mode in zip(path.jump_times, path.modes[1:]):
        k = int(np.ceil(s / h))
        if k > n_steps:
            break
        if k == steps[-1]:
            modes[-1] = int(mode)
        else:
            steps.append(k)
            modes.append(int(mode))
    return np.asarray(steps, dtype=np.int64), np.asarray(modes, dtype=np.int64)


def _skip_normals(gen: np.random.Generator, count: int) -> None:
    left = count
    while left > 0:
        take = min(left, 1 << 20)
        gen.standard_normal(take)
        left -= take


def run_paths(
    model: HybridModel,
    segment: InitialSegment,
    generator: GeneratorMatrix,
    r0: int,
    *,
    step: float,
    n_steps: int,
    delay_steps: int,
    mode: str,
    cap: float,
    master_seed: int,
    markov_seed: int | None,
    path_indices: Sequence[int],
    record_steps: np.ndarray,
    start_step: int = 0,
    backend: str | None = None,
) -> BatchResult:
    """Advance a set of paths and return their recorded states and modes."""
    if mode not in MODE_CODES:
        raise ValueError(f"mode must be one of {sorted(MODE_CODES)}, got {mode!r}")
    u_mode = MODE_CODES[mode]
    backend = backend or _kernels.default_backend()
    if backend == "numba" and not _kernels.HAS_NUMBA:
        backend = "numpy"
    kind = model.kernel.kind if model.kernel is not None else None
    if kind is None:
        backend = "python"

    n = model.dimension
    m_brownian = model.brownian_dim
    m_delay = delay_steps if u_mode == 2 else 0
    record_steps = np.asarray(record_steps, dtype=np.int64)
    paths = list(path_indices)
    P = len(paths)
    R = record_steps.size

    states = np.full((R, P, n), np.nan)
    modes_rec = np.zeros((R, P), dtype=np.int64)
    exploded_all = np.full(P, -1, dtype=np.int64)

    chain_seed = master_seed if markov_seed is None else markov_seed
    chain_horizon = (n_steps + 1) * step

    for lo in range(0, P, BATCH_PATHS):
        sel = paths[lo : lo + BATCH_PATHS]
        B = len(sel)

        # per-path switching schedules (own streams, whole horizon up front)
        sched_steps, sched_modes = [], []
        for pidx in sel:
            mpath = simulate_mode_path(generator, r0, chain_horizon, markov_stream(chain_seed, pidx))
            cs, cm = _mode_schedule(mpath, step, n_steps)
            sched_steps.append(cs)
            sched_modes.append(cm)
        jmax = max(len(cs) for cs in sched_steps)
        change_steps = np.full((B, jmax), n_steps + 2, dtype=np.int64)
        change_modes = np.ones((B, jmax), dtype=np.int64)
        n_changes = np.empty(B, dtype=np.int64)
        for i, (cs, cm) in enumerate(zip(sched_steps, sched_modes)):
            change_steps[i, : len(cs)] = cs
            change_modes[i, : len(cm)] = cm
            n_changes[i] = len(cs)
        mode_ptr = np.zeros(B, dtype=np.int64)

        gens = [brownian_stream(master_seed, pidx) for pidx in sel]
        if start_step > 0:
            for g in gens:
                _skip_normals(g, start_step * m_brownian)

        x = np.repeat(segment.samples[-1][None, :], B, axis=0)
        ring = np.zeros((max(m_delay, 1), B, n))
        for j in range(m_delay):
            ring[(start_step + j) % m_delay, :, :] = segment.samples[j]
        exploded = np.full(B, -1, dtype=np.int64)

        rec_states = np.full((R, B, n), np.nan)
        rec_modes = np.zeros((R, B), dtype=np.int64)

        _advance(
            model,
            backend,
            kind,
            x,
            ring,
            m_delay,
            exploded,
            start_step,
            n_steps,
            step,
            u_mode,
            cap,
            gens,
            m_brownian,
            change_steps,
            change_modes,
            n_changes,
            mode_ptr,
            record_steps,
            rec_states,
            rec_modes,
        )

        # the state at the final grid step is recorded after the last block
        tail = np.nonzero(record_steps == n_steps)[0]
        if tail.size:
            ti = tail[0]
            rec_states[ti] = x
            final_modes = np.empty(B, dtype=np.int64)
            for i in range(B):
                nc = n_changes[i]
                idx = np.searchsorted(change_steps[i, :nc], n_steps, side="right") - 1
                final_modes[i] = change_modes[i, idx]
            rec_modes[ti] = final_modes

        states[:, lo : lo + B, :] = rec_states
        modes_rec[:, lo : lo + B] = rec_modes
        exploded_all[lo : lo + B] = exploded

    return BatchResult(record_steps, states, modes_rec, exploded_all)


def _advance(
    model,
    backend,
    kind,
    x,
    ring,
    m_delay,
    exploded,
    start_step,
    n_steps,
    h,
    u_mode,
    cap,
    gens,
    m_brownian,
    change_steps,
    change_modes,
    n_changes,
    mode_ptr,
    record_steps,
    rec_states,
    rec_modes,
):
    B = x.shape[0]
    sqrt_h = float(np.sqrt(h))
    cap_sq = cap * cap
    if backend == "python":
        params = None
        stepper = None
    else:
        stepper = _kernels.get_block_stepper(kind, backend)
        params = model.kernel.params

    inc = np.empty((B, BLOCK_STEPS, m_brownian))
    k0 = start_step
    while k0 < n_steps:
        k1 = min(k0 + BLOCK_STEPS, n_steps)
        nblk = k1 - k0
        for i, g in enumerate(gens):
            inc[i, :nblk, :] = g.standard_normal(nblk * m_brownian).reshape(nblk, m_brownian)
        blk = inc[:, :nblk, :]
        rec_lo = int(np.searchsorted(record_steps, k0, side="left"))
        rec_hi = int(np.searchsorted(record_steps, k1 - 1, side="right"))

        if backend == "python":
            _python_block(
                model, x, ring, m_delay, exploded, k0, k1, h, sqrt_h, blk, u_mode,
                cap_sq, change_steps, change_modes, n_changes, mode_ptr,
                record_steps, rec_lo, rec_hi, rec_states, rec_modes,
            )
        elif backend == "numba":
            stepper(
                x, ring, m_delay, exploded, k0, k1, h, sqrt_h, blk, u_mode, cap_sq,
                *params,
                change_steps, change_modes, n_changes, mode_ptr,
                record_steps, rec_lo, rec_hi, rec_states, rec_modes,
            )
        else:
            stepper(
                x, ring, m_delay, exploded, k0, k1, h, sqrt_h, blk, u_mode, cap_sq,
                params,
                change_steps, change_modes, n_changes, mode_ptr,
                record_steps, rec_lo, rec_hi, rec_states, rec_modes,
            )
        k0 = k1


def _python_block(
    model,
    x,
    ring,
    m_delay,
    exploded,
    k0,
    k1,
    h,
    sqrt_h,
    inc,
    u_mode,
    cap_sq,
    change_steps,
    change_modes,
    n_changes,
    mode_ptr,
    record_steps,
    rec_lo,
    rec_hi,
    rec_states,
    rec_modes,
):
    """Generic route for models without a kernel spec: per-path Python loop
    through the user's coefficient callables. Same semantics, no speed."""
    B = x.shape[0]
    for pth in range(B):
        ptr = mode_ptr[pth]
        rp = rec_lo
        for k in range(k0, k1):
            while ptr + 1 < n_changes[pth] and change_steps[pth, ptr + 1] <= k:
                ptr += 1
            mode_i = int(change_modes[pth, ptr])
            if rp < rec_hi and record_steps[rp] == k:
                rec_states[rp, pth] = x[pth]
                rec_modes[rp, pth] = mode_i
                rp += 1
            if exploded[pth] >= 0:
                continue
            t = k * h
            xk = x[pth]
            # raw callables here: an overflowing coefficient must surface as
            # an exploded state, not an exception (shapes were vetted at
            # model construction)
            if u_mode == 0:
                u_term = 0.0
            elif u_mode == 1 or m_delay == 0:
                u_term = np.asarray(model.control(xk, mode_i, t), dtype=np.float64)
            else:
                u_term = np.asarray(
                    model.control(ring[k % m_delay, pth], mode_i, t), dtype=np.float64
                )
            drift = np.asarray(model.drift(xk, mode_i, t), dtype=np.float64) + u_term
            gmat = np.asarray(model.diffusion(xk, mode_i, t), dtype=np.float64)
            with np.errstate(over="ignore", invalid="ignore", under="ignore"):
                nx = xk + drift * h + gmat @ (sqrt_h * inc[pth, k - k0])
            if m_delay > 0:
                ring[k % m_delay, pth] = xk
            if np.all(np.isfinite(nx)) and float(nx @ nx) <= cap_sq:
                x[pth] = nx
            else:
                exploded[pth] = k + 1
                x[pth] = np.nan
        mode_ptr[pth] = ptr
