"""Built-in systems: the two-mode stochastic oscillator and a scalar
counterexample family.

The oscillator is the second-order system ``z'' + (a + b W') z' + z +
c sin(z) = 0`` written as a two-dimensional hybrid SDE with per-mode
coefficients, stabilised through a gain ``-d_i x_1`` fed into the first
component only (the observable/controllable one). Its gain design works
through per-mode 2x2 matrices ``Q_i``: the closed-loop stability form is
bounded by the quadratic form of ``Q_i`` in ``(x_1^2, x_2^2)``, so a
margin ``alpha_i`` is certified whenever ``Q_i + alpha_i * ones`` is
nonpositive on the closed positive quadrant.

The counterexample family is the scalar equation ``dx = -x dt + x^2 dB``
with cubic feedback ``-2 x^3``: instantaneous feedback gives fourth-moment
decay ``E|x(t)|^4 <= |x_0|^4 e^{-4t}``, while the same feedback applied
with *any* positive delay admits initial data whose second moment blows
up in finite time — the reason a maximal admissible delay has to be
computed rather than assumed. The blow-up is witnessed by an explicit
Riccati comparison solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np

from .core import HybridModel, InitialSegment, KernelSpec, LipschitzBounds, check_mode
from .markov import validate_generator
from .simulate import SimulationConfig, estimate_moment_exponent, monte_carlo_moment

__all__ = [
    "CounterexampleParams",
    "InstabilityDemo",
    "InstabilityDemoConfig",
    "OscillatorParams",
    "REFERENCE_GENERATOR",
    "SINGLE_MODE_GENERATOR",
    "best_alpha",
    "counterexample_initial_segment",
    "counterexample_model",
    "demonstrate_instability",
    "design_oscillator_gains",
    "linear_model",
    "oscillator_Q",
    "oscillator_lipschitz",
    "oscillator_margins",
    "oscillator_model",
    "quadrant_negativity",
    "reference_oscillator_params",
    "riccati_blowup_time",
    "riccati_u",
    "zbar",
]

#: switching generator of the reference oscillator
REFERENCE_GENERATOR = validate_generator([[-1.0, 1.0], [2.0, -2.0]])

#: trivial generator for single-mode systems (the counterexample family)
SINGLE_MODE_GENERATOR = validate_generator([[0.0]])

#: slack used when testing quadrant nonpositivity (floating arithmetic only)
QUADRANT_TOL = 1e-12


# ---------------------------------------------------------------------------
# oscillator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OscillatorParams:
    """Per-mode oscillator coefficients and control gains.

    ``a`` is the damping, ``b`` the noise coupling on the velocity,
    ``c`` the amplitude of the sine nonlinearity, ``d`` the (nonnegative)
    feedback gains. ``q_offdiag_base``/``q_diag_base`` optionally pin the
    design-matrix entries: the reference plant ships its fixed design
    table so gains and margins stay exactly reproducible, while plants
    without a table derive the entries from ``(a, b, c)`` (see
    :func:`oscillator_Q`).
    """

    a: tuple
    b: tuple
    c: tuple
    d: tuple
    q_offdiag_base: tuple | None = None
    q_diag_base: tuple | None = None

    def __post_init__(self) -> None:
        n = len(self.a)
        if n < 1 or any(len(v) != n for v in (self.b, self.c, self.d)):
            raise ValueError("a, b, c, d must be nonempty and of equal length")
        if any(di < 0.0 for di in self.d):
            raise ValueError("control gains d must be nonnegative")
        for base in (self.q_offdiag_base, self.q_diag_base):
            if base is not None and len(base) != n:
                raise ValueError("design-table bases must have one entry per mode")
        object.__setattr__(self, "a", tuple(float(v) for v in self.a))
        object.__setattr__(self, "b", tuple(float(v) for v in self.b))
        object.__setattr__(self, "c", tuple(float(v) for v in self.c))
        object.__setattr__(self, "d", tuple(float(v) for v in self.d))

    @property
    def n_modes(self) -> int:
        return len(self.a)

    def with_gains(self, d) -> "OscillatorParams":
        return OscillatorParams(
            self.a, self.b, self.c, tuple(float(v) for v in d),
            self.q_offdiag_base, self.q_diag_base,
        )


# Reference-plant design table: the quadratic-form bases used to pick the
# gains. They are fixed numbers for this plant (rather than re-derived from
# a, b, c) so the designed gains, margins and every constant downstream of
# them stay exactly reproducible.
_REF_A = (0.5, 0.1)
_REF_B = (0.4, 0.5)
_REF_C = (0.1, -0.1)
_REF_OFFDIAG_BASE = (-0.23, 0.28125)
_REF_DIAG_BASE = (-0.464, -0.125)


def design_oscillator_gains(p: float) -> tuple[float, float]:
    """Reference-plant gain design for moment order ``p`` in (0, 1).

    ``d1`` equalises the two diagonal entries of the mode-1 design matrix,
    ``d2`` equalises the off-diagonal and lower-diagonal entries of the
    mode-2 one, giving the closed forms

        d1 = 0.564 - 0.08 p,    d2 = 0.5625 + 0.25 (1 - p).
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"gain design requires p in (0, 1), got {p}")
    return 0.564 - 0.08 * p, 0.5625 + 0.25 * (1.0 - p)


def reference_oscillator_params(design_p: float = 0.99) -> OscillatorParams:
    """The bundled two-mode oscillator with gains designed for ``design_p``."""
    return OscillatorParams(
        _REF_A, _REF_B, _REF_C, design_oscillator_gains(design_p),
        _REF_OFFDIAG_BASE, _REF_DIAG_BASE,
    )


def oscillator_Q(i: int, p: float, params: OscillatorParams) -> np.ndarray:
    """Design matrix of mode ``i``: the quadratic form in ``(x_1^2, x_2^2)``
    bounding the closed-loop stability form.

        Q_i = [[ |c_i| - d_i,    w_i - 0.5 d_i    ],
               [ w_i - 0.5 d_i,  v_i + 0.5 p b_i^2 ]]

    with bases ``w_i``/``v_i`` from the plant's design table when present,
    else ``w_i = 0.5 (0.25 b_i^2 - a_i)`` and ``v_i = |c_i| - a_i - 0.5 b_i^2``.
    """
    k = check_mode(i, params.n_modes) - 1
    a, b, c, d = params.a[k], params.b[k], params.c[k], params.d[k]
    w = params.q_offdiag_base[k] if params.q_offdiag_base is not None else 0.5 * (0.25 * b * b - a)
    v = params.q_diag_base[k] if params.q_diag_base is not None else abs(c) - a - 0.5 * b * b
    q11 = abs(c) - d
    q12 = w - 0.5 * d
    q22 = v + 0.5 * p * b * b
    return np.array([[q11, q12], [q12, q22]])


def quadrant_negativity(Q: np.ndarray, alpha: float, tol: float = QUADRANT_TOL) -> bool:
    """True iff ``v^T (Q + alpha J) v <= 0`` for every ``v >= 0`` (J all ones).

    Exact 2x2 criterion: writing ``R = Q + alpha J``, the form is
    nonpositive on the quadrant iff ``r11 <= 0``, ``r22 <= 0`` and either
    ``r12 <= 0`` or ``r12^2 <= r11 r22``. ``tol`` absorbs rounding in the
    inputs only.
    """
    q = np.asarray(Q, dtype=np.float64)
    if q.shape != (2, 2) or abs(q[0, 1] - q[1, 0]) > 1e-9 * max(1.0, abs(q[0, 1])):
        raise ValueError("Q must be a symmetric 2x2 matrix")
    r11 = q[0, 0] + alpha
    r22 = q[1, 1] + alpha
    r12 = q[0, 1] + alpha
    if r11 > tol or r22 > tol:
        return False
    return r12 <= tol or r12 * r12 <= r11 * r22 + tol


def best_alpha(Q: np.ndarray, decimals: int | None = None) -> float:
    """Largest margin ``alpha`` with ``quadrant_negativity(Q, alpha)``.

    The admissible set is a half-line, so a bisection between a surely
    admissible and a surely inadmissible value converges to the edge.
    ``decimals`` optionally rounds the result (half-even) to the precision
    margins are conventionally quoted at; certificates built from quoted
    margins need exactly that value, not the full-precision edge.
    """
    q = np.asarray(Q, dtype=np.float64)
    lo = float(min(-q[0, 0], -q[1, 1], -q[0, 1])) - 1.0
    hi = float(min(-q[0, 0], -q[1, 1]))
    if not quadrant_negativity(q, lo):
        raise ValueError("no admissible margin found (non-symmetric input?)")
    if quadrant_negativity(q, hi):
        alpha = hi
    else:
        while True:
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            if quadrant_negativity(q, mid):
                lo = mid
            else:
                hi = mid
        alpha = lo
    if decimals is not None:
        quant = Decimal(1).scaleb(-decimals)
        alpha_q = float(Decimal(str(round(alpha, 10))).quantize(quant, rounding=ROUND_HALF_EVEN))
        if not quadrant_negativity(q, alpha_q):
            alpha_q = float(Decimal(str(alpha_q)) - quant)
        alpha = alpha_q
    return alpha


def oscillator_margins(p: float, params: OscillatorParams | None = None, decimals: int | None = 4) -> np.ndarray:
    """Per-mode stability margins extracted from the design matrices."""
    if params is None:
        params = reference_oscillator_params(p)
    return np.array(
        [best_alpha(oscillator_Q(i, p, params), decimals) for i in range(1, params.n_modes + 1)]
    )


def oscillator_lipschitz(params: OscillatorParams) -> LipschitzBounds:
    """Declared Lipschitz constants of the oscillator family:

        L1 = max_i sqrt(1 + a_i^2),   L2 = max_i d_i,   L3 = max_i |b_i|.

    L1 tracks the linear drift block (for the reference plant it evaluates
    to sqrt(1.25) = 1.1180339..., matching the shipped constant 1.118034
    to 1e-6) and by convention neglects the sine coupling's |c_i|
    contribution, so a sampling check against it can report slightly
    larger empirical ratios.
    """
    l1 = max(math.sqrt(1.0 + ai * ai) for ai in params.a)
    l2 = max(params.d)
    l3 = max(abs(bi) for bi in params.b)
    return LipschitzBounds(l1, l2, l3)


def oscillator_model(params: OscillatorParams) -> HybridModel:
    """Two-dimensional hybrid oscillator with scalar driving noise.

        f(x, i) = (x2, -x1 - c_i sin(x1) - a_i x2)
        g(x, i) = (0, -b_i x2)
        u(x, i) = (-d_i x1, 0)
    """
    a = np.asarray(params.a)
    b = np.asarray(params.b)
    c = np.asarray(params.c)
    d = np.asarray(params.d)

    def drift(x, i, t):
        k = i - 1
        return np.array([x[1], -x[0] - c[k] * math.sin(x[0]) - a[k] * x[1]])

    def diffusion(x, i, t):
        return np.array([[0.0], [-b[i - 1] * x[1]]])

    def control(x, i, t):
        return np.array([-d[i - 1] * x[0], 0.0])

    return HybridModel(
        dimension=2,
        modes=params.n_modes,
        brownian_dim=1,
        drift=drift,
        diffusion=diffusion,
        control=control,
        lipschitz=oscillator_lipschitz(params),
        name="oscillator",
        kernel=KernelSpec("oscillator", (a, b, c, d)),
    )


# ---------------------------------------------------------------------------
# matrix-specified linear hybrid systems
# ---------------------------------------------------------------------------


def linear_model(drift_mats, diffusion_mats, gain_mats, name: str = "linear") -> HybridModel:
    """Linear hybrid system ``f = A_i x``, ``g = (G_i x)`` (scalar noise),
    ``u = -D_i x`` with honestly computed spectral-norm Lipschitz bounds."""
    A = np.ascontiguousarray(np.asarray(drift_mats, dtype=np.float64))
    G = np.ascontiguousarray(np.asarray(diffusion_mats, dtype=np.float64))
    D = np.ascontiguousarray(np.asarray(gain_mats, dtype=np.float64))
    if A.ndim != 3 or A.shape[1] != A.shape[2]:
        raise ValueError("drift_mats must be a (N, n, n) stack of square matrices")
    if G.shape != A.shape or D.shape != A.shape:
        raise ValueError("diffusion_mats and gain_mats must match drift_mats' shape")
    n_modes, n = A.shape[0], A.shape[1]

    def drift(x, i, t):
        return A[i - 1] @ x

    def diffusion(x, i, t):
        return (G[i - 1] @ x)[:, None]

    def control(x, i, t):
        return -(D[i - 1] @ x)

    lip = LipschitzBounds(
        max(np.linalg.norm(A[k], 2) for k in range(n_modes)),
        max(np.linalg.norm(D[k], 2) for k in range(n_modes)),
        max(np.linalg.norm(G[k], 2) for k in range(n_modes)),
    )
    return HybridModel(
        dimension=n,
        modes=n_modes,
        brownian_dim=1,
        drift=drift,
        diffusion=diffusion,
        control=control,
        lipschitz=lip,
        name=name,
        kernel=KernelSpec("linear", (A, G, D)),
    )


# ---------------------------------------------------------------------------
# scalar counterexample family
# ---------------------------------------------------------------------------

COUNTEREXAMPLE_VARIANTS = ("uncontrolled", "controlled", "delayed")


def counterexample_model(variant: str, epsilon: float | None = None) -> HybridModel:
    """The scalar family ``dx = -x dt + x^2 dB`` with cubic feedback ``-2 x^3``.

    ``variant`` names how the feedback enters and doubles as the
    integration mode: absent, instantaneous, or applied with delay
    ``epsilon`` (required positive for the delayed variant). The
    coefficients are *not* globally Lipschitz: the model is flagged
    accordingly, which exempts it from ratio spot-checks and makes the
    delay-threshold calculus refuse it.
    """
    if variant not in COUNTEREXAMPLE_VARIANTS:
        raise ValueError(f"variant must be one of {COUNTEREXAMPLE_VARIANTS}, got {variant!r}")
    if variant == "delayed" and not (epsilon is not None and epsilon > 0.0):
        raise ValueError("the delayed variant needs epsilon > 0")

    def drift(x, i, t):
        return np.array([-x[0]])

    def diffusion(x, i, t):
        return np.array([[x[0] * x[0]]])

    def control(x, i, t):
        return np.array([-2.0 * x[0] ** 3])

    # local constants on the unit ball; no global ones exist for this family
    lip = LipschitzBounds(1.0, 6.0, 2.0)
    return HybridModel(
        dimension=1,
        modes=1,
        brownian_dim=1,
        drift=drift,
        diffusion=diffusion,
        control=control,
        lipschitz=lip,
        name=f"counterexample-{variant}",
        globally_lipschitz=False,
        kernel=KernelSpec("counterexample", ()),
    )


def zbar(epsilon: float) -> float:
    """Unique root ``z >= 2`` of ``0.5 - 2/z^2 = exp(-epsilon (2 + 0.5 z^2))``.

    The left side is negative at ``z = 2`` and increases to 0.5; the right
    side decreases from a positive value to 0, so bracket-and-bisect finds
    the single crossing. Residual at the returned root is below 1e-10.
    """
    if not epsilon > 0.0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")

    def psi(z: float) -> float:
        return 0.5 - 2.0 / (z * z) - math.exp(-epsilon * (2.0 + 0.5 * z * z))

    lo, hi = 2.0, 4.0
    for _ in range(200):
        if psi(hi) > 0.0:
            break
        lo = hi
        hi *= 2.0
    else:  # pragma: no cover - psi(hi) -> 0.5 for large z
        raise RuntimeError("failed to bracket the root")
    while True:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        v = psi(mid)
        if v < 0.0:
            lo = mid
        elif v > 0.0:
            hi = mid
        else:
            return mid
    return lo


@dataclass(frozen=True)
class CounterexampleParams:
    """A delay ``epsilon`` together with the matched initial amplitude ``z_bar``."""

    epsilon: float
    z_bar: float

    def __post_init__(self) -> None:
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be > 0")
        if self.z_bar < 2.0:
            raise ValueError("z_bar must be >= 2")
        residual = abs(
            0.5
            - 2.0 / (self.z_bar**2)
            - math.exp(-self.epsilon * (2.0 + 0.5 * self.z_bar**2))
        )
        if residual > 1e-10:
            raise ValueError(f"z_bar does not solve the amplitude equation (residual {residual:.3e})")

    @classmethod
    def solve(cls, epsilon: float) -> "CounterexampleParams":
        return cls(epsilon, zbar(epsilon))


def riccati_u(t: float, z_bar: float) -> float:
    """Explicit solution of ``u' = -(2 + 0.5 z_bar^2) u + u^2``, ``u(0) = z_bar^2``.

    This curve lower-bounds the delayed system's second moment on the
    initial stretch; past the finite blow-up time the bracket in the
    closed form is nonpositive and ``inf`` is returned as the blow-up
    marker.
    """
    if t < 0.0:
        raise ValueError("t must be >= 0")
    a = 2.0 + 0.5 * z_bar * z_bar
    inner = 1.0 / (z_bar * z_bar) + (math.exp(-a * t) - 1.0) / a
    if inner <= 0.0:
        return math.inf
    return math.exp(-a * t) / inner


def riccati_blowup_time(z_bar: float) -> float:
    """Analytic blow-up time ``t* = -(1/a) log(1 - a / z_bar^2)`` of
    :func:`riccati_u`; ``inf`` when the bracket never vanishes (z_bar <= 2).
    For ``z_bar`` solving the amplitude equation at delay ``epsilon`` the
    identity ``1 - a/z_bar^2 = exp(-epsilon a)`` makes ``t* = epsilon``
    exactly."""
    a = 2.0 + 0.5 * z_bar * z_bar
    arg = 1.0 - a / (z_bar * z_bar)
    if arg <= 0.0:
        return math.inf
    return -math.log(arg) / a


def counterexample_initial_segment(
    epsilon: float, step: float, z_bar: float | None = None
) -> InitialSegment:
    """Initial history driving the delayed counterexample to blow-up.

    ``phi(0) = z_bar`` with a plateau ``min(z_bar, (z_bar^2 / 8)^{1/3})``
    on ``[-epsilon, -epsilon/2]`` (so the delayed cubic feedback stays
    bounded by the plateau constraint) and a linear ramp up to ``z_bar``
    on the unconstrained half — any continuous completion is valid there,
    linear is chosen for determinism.
    """
    z = zbar(epsilon) if z_bar is None else z_bar
    plateau = min(z, (z * z / 8.0) ** (1.0 / 3.0))
    half = 0.5 * epsilon

    def phi(t: float):
        if t >= 0.0:
            return [z]
        if t <= -half:
            return [plateau]
        return [plateau + (z - plateau) * (t + half) / half]

    return InitialSegment.from_function(phi, epsilon, step)


# ---------------------------------------------------------------------------
# end-to-end instability demonstration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InstabilityDemoConfig:
    delayed_paths: int = 2000
    delayed_step: float = 1e-5
    moment_paths: int = 10_000
    moment_step: float = 1e-3
    master_seed: int = 2024
    record_count: int = 201
    explosion_cap: float = 1e12


@dataclass(frozen=True)
class InstabilityDemo:
    """Monte Carlo evidence that delayed cubic feedback loses stability.

    The delayed run starts from the blow-up initial segment and reports
    the fraction of paths hitting the explosion cap before ``t = epsilon``
    next to the Riccati lower bound for the second moment; the controlled
    and uncontrolled runs quantify the contrast (fourth-moment decay at
    rate 4 versus a slope above -4).
    """

    epsilon: float
    z_bar: float
    blowup_time: float
    delayed_times: np.ndarray
    delayed_second_moment: np.ndarray
    delayed_std_error: np.ndarray
    delayed_exploded_count: np.ndarray
    riccati_curve: np.ndarray
    cap_fraction: float
    controlled_times: np.ndarray
    controlled_fourth_moment: np.ndarray
    controlled_moment_at_one: float
    controlled_bound_at_one: float
    uncontrolled_slope: float

    def __str__(self) -> str:
        return "\n".join(
            [
                f"delay epsilon              : {self.epsilon:g}",
                f"initial amplitude z_bar    : {self.z_bar:.6f}",
                f"Riccati blow-up time       : {self.blowup_time:.6g}",
                f"cap-hit fraction by t=eps  : {self.cap_fraction:.4f}",
                f"controlled E|x(1)|^4       : {self.controlled_moment_at_one:.6e}"
                f"  (decay bound e^-4 = {self.controlled_bound_at_one:.6e})",
                f"uncontrolled 4th-moment slope on [0,1]: {self.uncontrolled_slope:+.4f}"
                "  (above -4: no rate-4 decay without control)",
            ]
        )


def demonstrate_instability(
    epsilon: float, config: InstabilityDemoConfig = InstabilityDemoConfig()
) -> InstabilityDemo:
    """Run the three counterexample experiments and bundle the evidence."""
    params = CounterexampleParams.solve(epsilon)
    z = params.z_bar

    delayed = counterexample_model("delayed", epsilon)
    segment = counterexample_initial_segment(epsilon, config.delayed_step, z)
    cfg_delayed = SimulationConfig(
        step=config.delayed_step,
        horizon=epsilon,
        delay=epsilon,
        path_count=config.delayed_paths,
        master_seed=config.master_seed,
        moment_order=2.0,
        record_times=np.linspace(0.0, epsilon, config.record_count),
        explosion_cap=config.explosion_cap,
    )
    est2 = monte_carlo_moment(delayed, SINGLE_MODE_GENERATOR, segment, cfg_delayed, "delayed")
    riccati_curve = np.array([riccati_u(t, z) for t in est2.times])
    cap_fraction = float(est2.exploded_count[-1]) / cfg_delayed.path_count

    controlled = counterexample_model("controlled")
    seg1 = InitialSegment.from_constant([1.0])
    cfg_moment = SimulationConfig(
        step=config.moment_step,
        horizon=1.0,
        path_count=config.moment_paths,
        master_seed=config.master_seed + 1,
        moment_order=4.0,
        record_times=np.linspace(0.0, 1.0, 101),
        explosion_cap=config.explosion_cap,
    )
    est4 = monte_carlo_moment(controlled, SINGLE_MODE_GENERATOR, seg1, cfg_moment, "controlled")

    uncontrolled = counterexample_model("uncontrolled")
    cfg_unc = SimulationConfig(
        step=config.moment_step,
        horizon=1.0,
        path_count=config.moment_paths,
        master_seed=config.master_seed + 2,
        moment_order=4.0,
        record_times=np.linspace(0.0, 1.0, 101),
        explosion_cap=config.explosion_cap,
    )
    est_unc = monte_carlo_moment(uncontrolled, SINGLE_MODE_GENERATOR, seg1, cfg_unc, "uncontrolled")
    unc_slope = estimate_moment_exponent(est_unc, (0.0, 1.0))

    return InstabilityDemo(
        epsilon=epsilon,
        z_bar=z,
        blowup_time=riccati_blowup_time(z),
        delayed_times=est2.times,
        delayed_second_moment=est2.mean_moment,
        delayed_std_error=est2.std_error,
        delayed_exploded_count=est2.exploded_count,
        riccati_curve=riccati_curve,
        cap_fraction=cap_fraction,
        controlled_times=est4.times,
        controlled_fourth_moment=est4.mean_moment,
        controlled_moment_at_one=float(est4.mean_moment[-1]),
        controlled_bound_at_one=math.exp(-4.0),
        uncontrolled_slope=unc_slope,
    )
