"""Shared domain types for hybrid stochastic systems.

Conventions used across the package:

* states are plain one-dimensional ``float64`` numpy arrays,
* modes are 1-based integers in ``{1, ..., N}`` (matching the usual
  state-space convention for switching chains),
* coefficient maps are callables ``(x, mode, t) -> array`` where the
  drift and control return an ``(n,)`` vector and the diffusion an
  ``(n, m)`` matrix for an ``m``-dimensional driving Brownian motion.

All types here are immutable after construction and safe to share across
concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Coefficient",
    "HybridModel",
    "InitialSegment",
    "KernelSpec",
    "LipschitzBounds",
    "ModelEvaluationError",
    "ModeProbeSummary",
    "ValidationReport",
    "as_state",
    "check_mode",
    "validate_model",
]

Coefficient = Callable[[np.ndarray, int, float], np.ndarray]

#: residual above which the zero-state condition f(0,i,t)=0 is considered violated
ZERO_CONDITION_TOL = 1e-12

#: relative slack applied to declared Lipschitz constants before flagging
LIPSCHITZ_REL_TOL = 1e-9


class ModelEvaluationError(ValueError):
    """A coefficient map returned a non-finite or mis-shaped value."""


def as_state(x: Sequence[float] | np.ndarray, dim: int | None = None) -> np.ndarray:
    """Coerce ``x`` to a finite 1-D float64 state vector.

    Raises ``ValueError`` for empty, non-1-D or non-finite input, and for a
    dimension mismatch when ``dim`` is given.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError(f"state must be a 1-D vector, got shape {arr.shape}")
    if dim is not None and arr.size != dim:
        raise ValueError(f"state has dimension {arr.size}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("state has non-finite entries")
    return arr


def check_mode(mode: int, n_modes: int) -> int:
    """Validate a 1-based mode index against the number of modes."""
    m = int(mode)
    if m != mode or not 1 <= m <= n_modes:
        raise ValueError(f"mode must be an integer in [1, {n_modes}], got {mode!r}")
    return m


@dataclass(frozen=True)
class LipschitzBounds:
    """Declared global Lipschitz constants of the coefficient maps.

    ``l1`` bounds the drift, ``l2`` the control and ``l3`` the diffusion.
    The constants are declared by the model author and only falsified by
    sampling (see :func:`validate_model`); certifying them for black-box
    maps is not possible.
    """

    l1: float
    l2: float
    l3: float

    def __post_init__(self) -> None:
        for name in ("l1", "l2", "l3"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0.0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class KernelSpec:
    """Tag attached to built-in models that unlocks the fast integrators.

    ``kind`` selects a compiled stepping kernel ("oscillator",
    "counterexample" or "linear"); ``params`` carries the per-kind
    parameter arrays in the order that kernel expects. Models without a
    spec integrate through the generic (per-path Python) route.
    """

    kind: str
    params: tuple


@dataclass(frozen=True)
class HybridModel:
    """A hybrid SDE: drift/diffusion plus a feedback-control map.

    The uncontrolled system is ``dx = f dt + g dB``; adding the control in
    the drift (instantaneous or delayed) gives the controlled variants.
    All three maps must vanish at ``x = 0`` for every mode and time; this
    is spot-checked at construction on each mode at ``t in {0, 1}``
    (pass ``check=False`` to skip, e.g. to probe a deliberately broken
    model with :func:`validate_model`).
    """

    dimension: int
    modes: int
    brownian_dim: int
    drift: Coefficient
    diffusion: Coefficient
    control: Coefficient
    lipschitz: LipschitzBounds
    name: str = "model"
    globally_lipschitz: bool = True
    kernel: KernelSpec | None = field(default=None, compare=False)
    check: bool = True

    def __post_init__(self) -> None:
        if self.dimension < 1 or self.modes < 1 or self.brownian_dim < 1:
            raise ValueError("dimension, modes and brownian_dim must all be >= 1")
        if self.check:
            self._spot_check()

    def _spot_check(self) -> None:
        zero = np.zeros(self.dimension)
        probe = np.ones(self.dimension)
        for i in range(1, self.modes + 1):
            for t in (0.0, 1.0):
                fz = self.eval_drift(zero, i, t)
                uz = self.eval_control(zero, i, t)
                gz = self.eval_diffusion(zero, i, t)
                if (
                    np.linalg.norm(fz) > ZERO_CONDITION_TOL
                    or np.linalg.norm(uz) > ZERO_CONDITION_TOL
                    or np.linalg.norm(gz) > ZERO_CONDITION_TOL
                ):
                    raise ValueError(
                        f"coefficients of mode {i} do not vanish at x=0, t={t}"
                    )
                # also exercises the shape/finiteness checks at a nonzero state
                self.eval_drift(probe, i, t)
                self.eval_control(probe, i, t)
                self.eval_diffusion(probe, i, t)

    def _checked(self, value: np.ndarray, shape: tuple, i: int, x: np.ndarray, t: float, what: str) -> np.ndarray:
        out = np.asarray(value, dtype=np.float64)
        if out.shape != shape:
            raise ModelEvaluationError(
                f"{what} of mode {i} returned shape {out.shape}, expected {shape}"
            )
        if not np.all(np.isfinite(out)):
            raise ModelEvaluationError(
                f"{what} of mode {i} is non-finite at x={x!r}, t={t}"
            )
        return out

    def eval_drift(self, x: np.ndarray, i: int, t: float) -> np.ndarray:
        return self._checked(self.drift(x, i, t), (self.dimension,), i, x, t, "drift")

    def eval_control(self, x: np.ndarray, i: int, t: float) -> np.ndarray:
        return self._checked(self.control(x, i, t), (self.dimension,), i, x, t, "control")

    def eval_diffusion(self, x: np.ndarray, i: int, t: float) -> np.ndarray:
        return self._checked(
            self.diffusion(x, i, t), (self.dimension, self.brownian_dim), i, x, t, "diffusion"
        )


@dataclass(frozen=True)
class InitialSegment:
    """Initial history for a delayed system, sampled on the integration grid.

    ``samples[k]`` is the state at time ``(k - m) * step`` for
    ``k = 0..m``, so the last row is the state at time 0. Between grid
    points the segment is the linear interpolant; with a single row it
    degenerates to a plain initial state.
    """

    samples: np.ndarray
    step: float
    initial_mode: int = 1

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(np.atleast_2d(np.asarray(self.samples, dtype=np.float64)))
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError("samples must be a (m+1, n) array")
        if not np.all(np.isfinite(arr)):
            raise ValueError("initial segment has non-finite entries")
        if arr.shape[0] > 1 and self.step <= 0.0:
            raise ValueError("step must be > 0 when the segment has history")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def dimension(self) -> int:
        return self.samples.shape[1]

    @property
    def delay_steps(self) -> int:
        return self.samples.shape[0] - 1

    @property
    def tau(self) -> float:
        return self.delay_steps * self.step

    def value(self, k: int) -> np.ndarray:
        """State at grid offset ``k`` in ``[-m, 0]`` (0 is the initial time)."""
        m = self.delay_steps
        if not -m <= k <= 0:
            raise ValueError(f"grid offset {k} outside [-{m}, 0]")
        return self.samples[k + m]

    def interpolate(self, t: float) -> np.ndarray:
        """Linearly interpolated state at ``t`` in ``[-tau, 0]``."""
        m = self.delay_steps
        if m == 0:
            if t != 0.0:
                raise ValueError("segment with no history is only defined at t=0")
            return self.samples[0]
        s = t / self.step + m
        if not -1e-9 <= s <= m + 1e-9:
            raise ValueError(f"time {t} outside [-{self.tau}, 0]")
        s = min(max(s, 0.0), float(m))
        lo = int(np.floor(s))
        hi = min(lo + 1, m)
        w = s - lo
        return (1.0 - w) * self.samples[lo] + w * self.samples[hi]

    @classmethod
    def from_constant(
        cls, x0, tau: float = 0.0, step: float = 0.0, initial_mode: int = 1
    ) -> "InitialSegment":
        """Constant history equal to ``x0`` on ``[-tau, 0]``."""
        x0 = as_state(x0)
        if tau == 0.0:
            return cls(x0[None, :], 0.0, initial_mode)
        m = _delay_steps(tau, step)
        return cls(np.repeat(x0[None, :], m + 1, axis=0), step, initial_mode)

    @classmethod
    def from_function(
        cls, fn: Callable[[float], Sequence[float]], tau: float, step: float, initial_mode: int = 1
    ) -> "InitialSegment":
        """Sample ``fn(t)`` on the grid of ``[-tau, 0]``."""
        m = _delay_steps(tau, step)
        rows = [as_state(fn((k - m) * step)) for k in range(m + 1)]
        return cls(np.stack(rows), step, initial_mode)


def _delay_steps(tau: float, step: float) -> int:
    if step <= 0.0:
        raise ValueError("step must be > 0 for a nonzero delay")
    m = int(round(tau / step))
    if m < 1 or abs(m * step - tau) > 1e-6 * tau:
        raise ValueError(
            f"delay {tau} is not an integer multiple of step {step} (relative "
            f"rounding error exceeds 1e-6)"
        )
    return m


@dataclass(frozen=True)
class ModeProbeSummary:
    """Per-mode maxima observed while probing one model."""

    mode: int
    zero_drift: float
    zero_control: float
    zero_diffusion: float
    ratio_drift: float | None
    ratio_control: float | None
    ratio_diffusion: float | None


@dataclass(frozen=True)
class ValidationReport:
    per_mode: tuple[ModeProbeSummary, ...]
    flags: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.flags

    def __str__(self) -> str:
        lines = []
        for s in self.per_mode:
            lines.append(
                f"mode {s.mode}: |f(0)|<={s.zero_drift:.3e} |u(0)|<={s.zero_control:.3e} "
                f"|g(0)|<={s.zero_diffusion:.3e}"
                + (
                    f"  ratios f/u/g = {s.ratio_drift:.6f}/{s.ratio_control:.6f}/{s.ratio_diffusion:.6f}"
                    if s.ratio_drift is not None
                    else "  (Lipschitz sampling skipped)"
                )
            )
        if self.flags:
            lines.append("FLAGS:")
            lines.extend(f"  - {f}" for f in self.flags)
        else:
            lines.append("no flags")
        return "\n".join(lines)


def validate_model(model: HybridModel, probe_count: int = 1000, rng_seed: int = 0) -> ValidationReport:
    """Spot-check the zero condition and falsify declared Lipschitz bounds.

    For every mode the report lists the largest ``|f(0,i,t)|``, ``|u(0,i,t)|``
    and ``|g(0,i,t)|`` seen over a deterministic set of time probes, plus the
    largest empirical ratio ``|f(x)-f(y)|/|x-y|`` over ``probe_count`` random
    pairs (half drawn independently at log-uniform radii, half as tight local
    pairs, which is where derivative-scale violations show up). A ratio above
    a declared constant by more than ``LIPSCHITZ_REL_TOL`` relative is flagged.
    A clean report is evidence, not proof, that the declaration holds.

    Models marked ``globally_lipschitz=False`` skip the ratio sampling.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    n = model.dimension
    t_probes = np.concatenate(([0.0, 1.0], 10.0 ** rng.uniform(-6, 3, size=8)))
    zero = np.zeros(n)

    declared = model.lipschitz
    summaries = []
    flags: list[str] = []
    for i in range(1, model.modes + 1):
        z_f = max(float(np.linalg.norm(model.eval_drift(zero, i, t))) for t in t_probes)
        z_u = max(float(np.linalg.norm(model.eval_control(zero, i, t))) for t in t_probes)
        z_g = max(float(np.linalg.norm(model.eval_diffusion(zero, i, t))) for t in t_probes)
        for label, z in (("drift", z_f), ("control", z_u), ("diffusion", z_g)):
            if z > ZERO_CONDITION_TOL:
                flags.append(f"mode {i}: {label} does not vanish at x=0 (|.|={z:.3e})")

        if not model.globally_lipschitz:
            summaries.append(ModeProbeSummary(i, z_f, z_u, z_g, None, None, None))
            continue

        r_f = r_u = r_g = 0.0
        for k in range(probe_count):
            radius = 10.0 ** rng.uniform(-3, 3)
            x = rng.standard_normal(n)
            x *= radius / max(np.linalg.norm(x), 1e-300)
            if k % 2 == 0:
                y = rng.standard_normal(n)
                y *= 10.0 ** rng.uniform(-3, 3) / max(np.linalg.norm(y), 1e-300)
            else:
                d = rng.standard_normal(n)
                y = x + 1e-6 * radius * d / max(np.linalg.norm(d), 1e-300)
            gap = float(np.linalg.norm(x - y))
            if gap == 0.0:
                continue
            t = float(t_probes[k % len(t_probes)])
            r_f = max(r_f, float(np.linalg.norm(model.eval_drift(x, i, t) - model.eval_drift(y, i, t))) / gap)
            r_u = max(r_u, float(np.linalg.norm(model.eval_control(x, i, t) - model.eval_control(y, i, t))) / gap)
            r_g = max(r_g, float(np.linalg.norm(model.eval_diffusion(x, i, t) - model.eval_diffusion(y, i, t))) / gap)
        for label, ratio, bound in (
            ("drift", r_f, declared.l1),
            ("control", r_u, declared.l2),
            ("diffusion", r_g, declared.l3),
        ):
            if ratio > bound * (1.0 + LIPSCHITZ_REL_TOL) + (0.0 if bound > 0 else 1e-300):
                flags.append(
                    f"mode {i}: empirical {label} ratio {ratio:.6f} exceeds declared {bound:.6f}"
                )
        summaries.append(ModeProbeSummary(i, z_f, z_u, z_g, r_f, r_u, r_g))

    return ValidationReport(tuple(summaries), tuple(flags))
