"""Stepping kernels for the Euler-Maruyama engine.

Every built-in model kind ("oscillator", "counterexample", "linear") has
two implementations of the same block-stepping contract: a numba-jitted
kernel that loops over paths and steps, and a vectorised numpy twin used
when numba is unavailable or when ``DELAYSTAB_FORCE_NUMPY=1`` is set.
Both consume pre-generated per-path Gaussian increments, so the selected
backend changes speed, never the numbers' provenance.

Block contract (one call advances a batch from step ``k0`` to ``k1``):

* ``x``            (B, n)   current states, NaN once a path exploded
* ``ring``         (max(m,1), B, n) delay line; slot ``k % m`` holds the
                   state from step ``k - m`` at the moment step ``k`` runs
* ``exploded``     (B,)     step index of the first bad state, -1 if alive
* ``inc``          (B, k1-k0, m) standard normal draws for these steps
* ``u_mode``       0 uncontrolled, 1 instantaneous control, 2 delayed
* ``change_steps/change_modes/n_changes/mode_ptr`` per-path mode schedule
                   (``change_steps[:, 0] == 0`` carries the initial mode)
* ``record_steps[rec_lo:rec_hi]`` the record indices inside this block;
  states and 1-based modes are written to ``rec_states``/``rec_modes``
  *before* the step at that index runs.

Explosion means a non-finite component or ``|x| > cap``; the path is
frozen at NaN from that step on (the caller substitutes the cap value
where a moment needs it).
"""

from __future__ import annotations

import math
import os

import numpy as np

__all__ = [
    "FORCE_NUMPY",
    "HAS_NUMBA",
    "available_backends",
    "default_backend",
    "get_block_stepper",
]

FORCE_NUMPY = os.environ.get("DELAYSTAB_FORCE_NUMPY", "").strip().lower() not in (
    "",
    "0",
    "false",
)

try:
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    HAS_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        def deco(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return deco

    prange = range


def default_backend() -> str:
    return "numba" if (HAS_NUMBA and not FORCE_NUMPY) else "numpy"


def available_backends() -> tuple[str, ...]:
    return ("numba", "numpy") if HAS_NUMBA else ("numpy",)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def _oscillator_nb(
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
    a,
    b,
    c,
    d,
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
    B = x.shape[0]
    for pth in prange(B):
        ptr = mode_ptr[pth]
        rp = rec_lo
        for k in range(k0, k1):
            while ptr + 1 < n_changes[pth] and change_steps[pth, ptr + 1] <= k:
                ptr += 1
            mi = change_modes[pth, ptr] - 1
            if rp < rec_hi and record_steps[rp] == k:
                rec_states[rp, pth, 0] = x[pth, 0]
                rec_states[rp, pth, 1] = x[pth, 1]
                rec_modes[rp, pth] = mi + 1
                rp += 1
            if exploded[pth] >= 0:
                continue
            x1 = x[pth, 0]
            x2 = x[pth, 1]
            if u_mode == 0:
                u1 = 0.0
            elif u_mode == 1 or m_delay == 0:
                u1 = -d[mi] * x1
            else:
                u1 = -d[mi] * ring[k % m_delay, pth, 0]
            nx1 = x1 + (x2 + u1) * h
            nx2 = (
                x2
                + (-x1 - c[mi] * math.sin(x1) - a[mi] * x2) * h
                + (-b[mi] * x2) * (sqrt_h * inc[pth, k - k0, 0])
            )
            if m_delay > 0:
                ring[k % m_delay, pth, 0] = x1
                ring[k % m_delay, pth, 1] = x2
            if math.isfinite(nx1) and math.isfinite(nx2) and nx1 * nx1 + nx2 * nx2 <= cap_sq:
                x[pth, 0] = nx1
                x[pth, 1] = nx2
            else:
                exploded[pth] = k + 1
                x[pth, 0] = np.nan
                x[pth, 1] = np.nan
        mode_ptr[pth] = ptr


@njit(cache=True, parallel=True)
def _counterexample_nb(
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
    B = x.shape[0]
    for pth in prange(B):
        ptr = mode_ptr[pth]
        rp = rec_lo
        for k in range(k0, k1):
            while ptr + 1 < n_changes[pth] and change_steps[pth, ptr + 1] <= k:
                ptr += 1
            if rp < rec_hi and record_steps[rp] == k:
                rec_states[rp, pth, 0] = x[pth, 0]
                rec_modes[rp, pth] = change_modes[pth, ptr]
                rp += 1
            if exploded[pth] >= 0:
                continue
            x1 = x[pth, 0]
            if u_mode == 0:
                u1 = 0.0
            elif u_mode == 1 or m_delay == 0:
                u1 = -2.0 * x1 * x1 * x1
            else:
                xd = ring[k % m_delay, pth, 0]
                u1 = -2.0 * xd * xd * xd
            nx1 = x1 + (-x1 + u1) * h + (x1 * x1) * (sqrt_h * inc[pth, k - k0, 0])
            if m_delay > 0:
                ring[k % m_delay, pth, 0] = x1
            if math.isfinite(nx1) and nx1 * nx1 <= cap_sq:
                x[pth, 0] = nx1
            else:
                exploded[pth] = k + 1
                x[pth, 0] = np.nan
        mode_ptr[pth] = ptr


@njit(cache=True, parallel=True)
def _linear_nb(
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
    A,
    G,
    D,
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
    B = x.shape[0]
    n = x.shape[1]
    for pth in prange(B):
        ptr = mode_ptr[pth]
        rp = rec_lo
        xn = np.empty(n)
        for k in range(k0, k1):
            while ptr + 1 < n_changes[pth] and change_steps[pth, ptr + 1] <= k:
                ptr += 1
            mi = change_modes[pth, ptr] - 1
            if rp < rec_hi and record_steps[rp] == k:
                for j in range(n):
                    rec_states[rp, pth, j] = x[pth, j]
                rec_modes[rp, pth] = mi + 1
                rp += 1
            if exploded[pth] >= 0:
                continue
            db = sqrt_h * inc[pth, k - k0, 0]
            ok = True
            norm_sq = 0.0
            for j in range(n):
                fj = 0.0
                uj = 0.0
                gj = 0.0
                for l in range(n):
                    xl = x[pth, l]
                    fj += A[mi, j, l] * xl
                    gj += G[mi, j, l] * xl
                    if u_mode == 1 or (u_mode == 2 and m_delay == 0):
                        uj -= D[mi, j, l] * xl
                    elif u_mode == 2:
                        uj -= D[mi, j, l] * ring[k % m_delay, pth, l]
                xn[j] = x[pth, j] + (fj + uj) * h + gj * db
                if not math.isfinite(xn[j]):
                    ok = False
                norm_sq += xn[j] * xn[j]
            if m_delay > 0:
                for j in range(n):
                    ring[k % m_delay, pth, j] = x[pth, j]
            if ok and norm_sq <= cap_sq:
                for j in range(n):
                    x[pth, j] = xn[j]
            else:
                exploded[pth] = k + 1
                for j in range(n):
                    x[pth, j] = np.nan
        mode_ptr[pth] = ptr


# ---------------------------------------------------------------------------
# numpy fallback kernels
# ---------------------------------------------------------------------------


def _modes_for_block(change_steps, change_modes, n_changes, k0, k1):
    """Per-path 1-based mode for every step in [k0, k1), from the schedules."""
    B = change_steps.shape[0]
    ks = np.arange(k0, k1, dtype=np.int64)
    out = np.empty((B, k1 - k0), dtype=np.int64)
    for pth in range(B):
        nc = n_changes[pth]
        idx = np.searchsorted(change_steps[pth, :nc], ks, side="right") - 1
        out[pth] = change_modes[pth, idx]
    return out


def _np_block(coeff_step):
    """Build a numpy block stepper around a vectorised coefficient step.

    ``coeff_step(x, xd, mi0, u_mode, db)`` returns the full Euler-Maruyama
    update for the batch (``mi0`` is the 0-based mode per path).
    """

    def stepper(
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
        params,
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
        modes_blk = _modes_for_block(change_steps, change_modes, n_changes, k0, k1)
        alive = exploded < 0
        rp = rec_lo
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            for k in range(k0, k1):
                mi0 = modes_blk[:, k - k0] - 1
                if rp < rec_hi and record_steps[rp] == k:
                    rec_states[rp] = x
                    rec_modes[rp] = modes_blk[:, k - k0]
                    rp += 1
                if u_mode == 2 and m_delay > 0:
                    xd = ring[k % m_delay]
                else:
                    xd = x
                db = sqrt_h * inc[:, k - k0, :]
                nx = coeff_step(x, xd, mi0, u_mode, db, h, params)
                if m_delay > 0:
                    ring[k % m_delay][alive] = x[alive]
                bad = ~np.all(np.isfinite(nx), axis=1) | (
                    np.einsum("ij,ij->i", nx, nx) > cap_sq
                )
                newly = alive & bad
                if np.any(newly):
                    exploded[newly] = k + 1
                    x[newly] = np.nan
                    alive = alive & ~bad
                upd = alive & ~bad
                x[upd] = nx[upd]
        # keep the pointer walk consistent with the jitted kernels
        for pth in range(x.shape[0]):
            ptr = mode_ptr[pth]
            while ptr + 1 < n_changes[pth] and change_steps[pth, ptr + 1] <= k1 - 1:
                ptr += 1
            mode_ptr[pth] = ptr

    return stepper


def _osc_step(x, xd, mi0, u_mode, db, h, params):
    a, b, c, d = params
    x1, x2 = x[:, 0], x[:, 1]
    u1 = 0.0 if u_mode == 0 else -d[mi0] * xd[:, 0]
    nx = np.empty_like(x)
    nx[:, 0] = x1 + (x2 + u1) * h
    nx[:, 1] = x2 + (-x1 - c[mi0] * np.sin(x1) - a[mi0] * x2) * h + (-b[mi0] * x2) * db[:, 0]
    return nx


def _ctrex_step(x, xd, mi0, u_mode, db, h, params):
    x1 = x[:, 0]
    u1 = 0.0 if u_mode == 0 else -2.0 * xd[:, 0] ** 3
    nx = np.empty_like(x)
    nx[:, 0] = x1 + (-x1 + u1) * h + x1 * x1 * db[:, 0]
    return nx


def _linear_step(x, xd, mi0, u_mode, db, h, params):
    A, G, D = params
    fx = np.einsum("bij,bj->bi", A[mi0], x)
    gx = np.einsum("bij,bj->bi", G[mi0], x)
    if u_mode == 0:
        ux = 0.0
    else:
        ux = -np.einsum("bij,bj->bi", D[mi0], xd)
    return x + (fx + ux) * h + gx * db[:, 0:1]


_NUMPY_STEPPERS = {
    "oscillator": _np_block(_osc_step),
    "counterexample": _np_block(_ctrex_step),
    "linear": _np_block(_linear_step),
}

_NUMBA_STEPPERS = {
    "oscillator": _oscillator_nb,
    "counterexample": _counterexample_nb,
    "linear": _linear_nb,
}


def get_block_stepper(kind: str, backend: str):
    """Resolve the block stepper for a model kind on the given backend.

    The numba steppers take the kind's parameter arrays as positional
    arguments after ``cap_sq``; the numpy steppers take them bundled as one
    ``params`` tuple. The engine adapts the call accordingly.
    """
    if backend == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is not importable")
        return _NUMBA_STEPPERS[kind]
    if backend == "numpy":
        return _NUMPY_STEPPERS[kind]
    raise ValueError(f"unknown backend {backend!r}")
