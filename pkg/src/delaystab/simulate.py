"""Euler-Maruyama integration and Monte Carlo moment estimation.

The integrator advances ``x_{k+1} = x_k + (f + u_term) h + g dB_k`` with
the switching mode held at its value at the step's left endpoint. The
control term is 0 (``"uncontrolled"``), evaluated at the current state
(``"controlled"``), or evaluated at the state ``delay`` time units back
(``"delayed"``, with the delay an exact multiple of the step so the
delayed value is a plain index offset — no interpolation bias in the one
quantity under study).

Explosions are first-class: the first step whose state is non-finite or
exceeds the cap freezes the path and is reported, and moment estimates
charge such paths the cap value rather than dropping them (dropping
would bias stability claims optimistically).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._engine import MODE_CODES, run_paths
from .core import HybridModel, InitialSegment
from .markov import GeneratorMatrix

__all__ = [
    "MomentEstimate",
    "Path",
    "SampledPaths",
    "SimulationConfig",
    "estimate_moment_exponent",
    "estimate_pathwise_exponent",
    "integrate_path",
    "monte_carlo_moment",
    "sample_paths",
]

#: hard ceiling on dense-grid Path objects (use sampled recording beyond it)
MAX_DENSE_STEPS = 10_000_000

#: default number of uniformly spaced record times
DEFAULT_RECORD_COUNT = 1000


@dataclass(frozen=True)
class SimulationConfig:
    """Grid, delay, path count and random-stream configuration.

    The delay is rounded to the nearest integer multiple of the step; a
    relative rounding above 1e-6 is an error (the grid cannot represent
    that delay). ``markov_seed`` re-randomises the switching chain while
    keeping Brownian increments fixed; by default both substream families
    derive from ``master_seed``.
    """

    step: float
    horizon: float
    delay: float = 0.0
    path_count: int = 1
    master_seed: int = 0
    moment_order: float = 2.0
    record_times: np.ndarray | None = None
    explosion_cap: float = 1e12
    markov_seed: int | None = None

    def __post_init__(self) -> None:
        if not (np.isfinite(self.step) and self.step > 0.0):
            raise ValueError(f"step must be finite and > 0, got {self.step}")
        if not (np.isfinite(self.horizon) and self.horizon > 0.0):
            raise ValueError(f"horizon must be finite and > 0, got {self.horizon}")
        if self.path_count < 1:
            raise ValueError("path_count must be >= 1")
        if self.moment_order <= 0.0:
            raise ValueError("moment_order must be > 0")
        if self.explosion_cap <= 0.0:
            raise ValueError("explosion_cap must be > 0")
        if self.master_seed < 0 or (self.markov_seed is not None and self.markov_seed < 0):
            raise ValueError("seeds must be nonnegative integers")

        n_steps = int(round(self.horizon / self.step))
        if n_steps < 1 or abs(n_steps * self.step - self.horizon) > 1e-9 * max(self.horizon, 1.0):
            raise ValueError(
                f"horizon {self.horizon} does not sit on the step grid (step {self.step})"
            )

        if self.delay < 0.0:
            raise ValueError("delay must be >= 0")
        if self.delay == 0.0:
            delay_steps = 0
        else:
            delay_steps = int(round(self.delay / self.step))
            rounded = delay_steps * self.step
            if delay_steps < 1 or abs(rounded - self.delay) > 1e-6 * self.delay:
                raise ValueError(
                    f"delay {self.delay} is not an integer multiple of step "
                    f"{self.step} (relative rounding exceeds 1e-6)"
                )

        times = self.record_times
        if times is None:
            times = np.linspace(0.0, self.horizon, DEFAULT_RECORD_COUNT)
        times = np.asarray(times, dtype=np.float64)
        if times.ndim != 1 or times.size < 1:
            raise ValueError("record_times must be a nonempty 1-D array")
        if np.any(np.diff(times) <= 0.0):
            raise ValueError("record_times must be strictly increasing")
        if times[0] < -1e-12 or times[-1] > self.horizon * (1.0 + 1e-12):
            raise ValueError("record_times must lie inside [0, horizon]")
        steps = np.rint(times / self.step).astype(np.int64)
        steps = np.clip(steps, 0, n_steps)
        if np.any(np.diff(steps) <= 0):
            raise ValueError(
                "record_times collide after snapping to the step grid; "
                "use fewer record times or a smaller step"
            )

        object.__setattr__(self, "record_times", steps * self.step)
        object.__setattr__(self, "_record_steps", steps)
        object.__setattr__(self, "_n_steps", n_steps)
        object.__setattr__(self, "_delay_steps", delay_steps)

    @property
    def n_steps(self) -> int:
        return self._n_steps

    @property
    def delay_steps(self) -> int:
        return self._delay_steps

    @property
    def delay_rounded(self) -> float:
        return self._delay_steps * self.step

    @property
    def record_steps(self) -> np.ndarray:
        return self._record_steps


@dataclass(frozen=True)
class Path:
    """One trajectory on the full integration grid.

    ``states`` are NaN at and after ``exploded_at`` (the first grid time
    whose state left the finite ball of radius ``explosion_cap``); modes
    are the 1-based chain values at each grid time. The seed provenance
    fields pin down exactly which substreams produced the path.
    """

    times: np.ndarray
    states: np.ndarray
    modes: np.ndarray
    exploded_at: float | None
    master_seed: int
    path_index: int

    @property
    def exploded(self) -> bool:
        return self.exploded_at is not None

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=1)


@dataclass(frozen=True)
class SampledPaths:
    """States of many paths recorded at shared times (NaN after explosion)."""

    times: np.ndarray
    states: np.ndarray  # (R, P, n)
    modes: np.ndarray  # (R, P)
    exploded_at: np.ndarray  # (P,), NaN where the path never exploded

    @property
    def path_count(self) -> int:
        return self.states.shape[1]

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=2)


@dataclass(frozen=True)
class MomentEstimate:
    """Monte Carlo estimate of ``E |x(t)|^p`` at the record times.

    Exploded paths contribute ``explosion_cap ** p`` from their explosion
    time on; ``exploded_count`` reports how many did at each time.
    """

    times: np.ndarray
    mean_moment: np.ndarray
    std_error: np.ndarray
    path_count: int
    moment_order: float
    exploded_count: np.ndarray


def _check_segment(model: HybridModel, segment: InitialSegment, cfg: SimulationConfig, mode: str) -> None:
    if segment.dimension != model.dimension:
        raise ValueError(
            f"segment dimension {segment.dimension} != model dimension {model.dimension}"
        )
    if mode == "delayed" and cfg.delay_steps > 0:
        if segment.delay_steps != cfg.delay_steps:
            raise ValueError(
                f"initial segment covers {segment.delay_steps} grid steps but the "
                f"delay needs {cfg.delay_steps}"
            )
        if abs(segment.step - cfg.step) > 1e-12 * cfg.step:
            raise ValueError("initial segment step differs from the simulation step")


def integrate_path(
    model: HybridModel,
    generator: GeneratorMatrix,
    segment: InitialSegment,
    cfg: SimulationConfig,
    mode: str,
    r0: int | None = None,
    path_index: int = 0,
    start_step: int = 0,
    backend: str | None = None,
) -> Path:
    """Integrate one path and return it on the full grid.

    ``r0`` defaults to the segment's initial mode and always refers to the
    chain value at time 0, also when ``start_step > 0``: a restart replays
    the same mode path and Brownian stream with the consumed prefix
    skipped, which reproduces the original trajectory bit-for-bit from the
    restart point (the flow property of the solution).
    """
    if mode not in MODE_CODES:
        raise ValueError(f"mode must be one of {sorted(MODE_CODES)}, got {mode!r}")
    _check_segment(model, segment, cfg, mode)
    if not 0 <= start_step < cfg.n_steps:
        raise ValueError(f"start_step must lie in [0, {cfg.n_steps})")
    n_grid = cfg.n_steps - start_step + 1
    if n_grid > MAX_DENSE_STEPS:
        raise ValueError(
            f"dense path of {n_grid} grid points exceeds MAX_DENSE_STEPS; "
            "use sample_paths with record times instead"
        )
    record_steps = np.arange(start_step, cfg.n_steps + 1, dtype=np.int64)
    res = run_paths(
        model,
        segment,
        generator,
        segment.initial_mode if r0 is None else r0,
        step=cfg.step,
        n_steps=cfg.n_steps,
        delay_steps=cfg.delay_steps,
        mode=mode,
        cap=cfg.explosion_cap,
        master_seed=cfg.master_seed,
        markov_seed=cfg.markov_seed,
        path_indices=[path_index],
        record_steps=record_steps,
        start_step=start_step,
        backend=backend,
    )
    exploded_at = None
    if res.exploded_step[0] >= 0:
        exploded_at = float(res.exploded_step[0] * cfg.step)
    return Path(
        times=record_steps * cfg.step,
        states=res.states[:, 0, :],
        modes=res.modes[:, 0],
        exploded_at=exploded_at,
        master_seed=cfg.master_seed,
        path_index=path_index,
    )


def sample_paths(
    model: HybridModel,
    generator: GeneratorMatrix,
    segment: InitialSegment,
    cfg: SimulationConfig,
    mode: str,
    r0: int | None = None,
    path_indices=None,
    backend: str | None = None,
) -> SampledPaths:
    """Run ``cfg.path_count`` paths, recording states at ``cfg.record_times``."""
    if mode not in MODE_CODES:
        raise ValueError(f"mode must be one of {sorted(MODE_CODES)}, got {mode!r}")
    _check_segment(model, segment, cfg, mode)
    if path_indices is None:
        path_indices = range(cfg.path_count)
    res = run_paths(
        model,
        segment,
        generator,
        segment.initial_mode if r0 is None else r0,
        step=cfg.step,
        n_steps=cfg.n_steps,
        delay_steps=cfg.delay_steps,
        mode=mode,
        cap=cfg.explosion_cap,
        master_seed=cfg.master_seed,
        markov_seed=cfg.markov_seed,
        path_indices=list(path_indices),
        record_steps=cfg.record_steps,
        backend=backend,
    )
    exploded_at = np.where(res.exploded_step >= 0, res.exploded_step * cfg.step, np.nan)
    return SampledPaths(cfg.record_times.copy(), res.states, res.modes, exploded_at)


def monte_carlo_moment(
    model: HybridModel,
    generator: GeneratorMatrix,
    segment: InitialSegment,
    cfg: SimulationConfig,
    mode: str,
    r0: int | None = None,
    workers: int | None = None,
    backend: str | None = None,
) -> MomentEstimate:
    """Estimate ``E |x(t)|^p`` over ``cfg.path_count`` independent paths.

    Per-path substreams are derived from ``(master_seed, path_index)`` and
    aggregation slots are fixed by path index, so the estimate is
    bit-identical for any ``workers`` value or batch split.
    """
    if cfg.path_count < 2:
        raise ValueError("monte_carlo_moment needs path_count >= 2")
    if mode not in MODE_CODES:
        raise ValueError(f"mode must be one of {sorted(MODE_CODES)}, got {mode!r}")
    _check_segment(model, segment, cfg, mode)

    p = cfg.moment_order
    r_steps = cfg.record_steps
    R, P = r_steps.size, cfg.path_count
    norms = np.empty((R, P))
    exploded_step = np.empty(P, dtype=np.int64)

    def run_chunk(chunk: range) -> None:
        res = run_paths(
            model,
            segment,
            generator,
            segment.initial_mode if r0 is None else r0,
            step=cfg.step,
            n_steps=cfg.n_steps,
            delay_steps=cfg.delay_steps,
            mode=mode,
            cap=cfg.explosion_cap,
            master_seed=cfg.master_seed,
            markov_seed=cfg.markov_seed,
            path_indices=list(chunk),
            record_steps=r_steps,
            backend=backend,
        )
        norms[:, chunk.start : chunk.stop] = np.linalg.norm(res.states, axis=2)
        exploded_step[chunk.start : chunk.stop] = res.exploded_step

    if workers is not None and workers > 1:
        size = math.ceil(P / workers)
        chunks = [range(lo, min(lo + size, P)) for lo in range(0, P, size)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_chunk, chunks))
    else:
        run_chunk(range(0, P))

    # capped contribution from the explosion time on
    expl = exploded_step >= 0
    if np.any(expl):
        hit = expl[None, :] & (exploded_step[None, :] <= r_steps[:, None])
        norms = np.where(hit, cfg.explosion_cap, norms)
    with np.errstate(over="ignore"):
        vals = norms**p
    mean = vals.mean(axis=1)
    std_err = vals.std(axis=1, ddof=1) / math.sqrt(P)
    exploded_count = (expl[None, :] & (exploded_step[None, :] <= r_steps[:, None])).sum(axis=1)
    return MomentEstimate(cfg.record_times.copy(), mean, std_err, P, p, exploded_count)


def _window_mask(times: np.ndarray, window) -> np.ndarray:
    a, b = float(window[0]), float(window[1])
    if not a < b:
        raise ValueError(f"window must satisfy a < b, got {window}")
    return (times >= a - 1e-12) & (times <= b + 1e-12)


def estimate_moment_exponent(est: MomentEstimate, window) -> float:
    """Least-squares slope of ``log E|x(t)|^p`` over the window (1/time).

    Needs at least three record times in the window with strictly positive
    moment estimates; a zero estimate means the sample went below the
    floating floor — shrink the window.
    """
    mask = _window_mask(est.times, window)
    if mask.sum() < 3:
        raise ValueError("need at least 3 record times inside the window")
    m = est.mean_moment[mask]
    if np.any(m <= 0.0) or not np.all(np.isfinite(m)):
        raise ValueError("moment estimates in the window must be finite and > 0")
    slope = np.polyfit(est.times[mask], np.log(m), 1)[0]
    return float(slope)


def estimate_pathwise_exponent(path: Path, window) -> float:
    """Least-squares slope of ``log |x(t)|`` over the window for one path."""
    mask = _window_mask(path.times, window)
    if mask.sum() < 3:
        raise ValueError("need at least 3 grid times inside the window")
    if path.exploded_at is not None and path.exploded_at <= float(window[1]):
        raise ValueError("path exploded inside the window")
    nrm = path.norms()[mask]
    if np.any(nrm <= 0.0):
        raise ValueError("path hits zero inside the window")
    slope = np.polyfit(path.times[mask], np.log(nrm), 1)[0]
    return float(slope)
