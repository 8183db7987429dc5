"""Explicit constants and the maximal admissible feedback delay.

Given the declared Lipschitz constants of a controlled hybrid SDE and an
exponential moment bound ``E|y(t)|^p <= M E|y(t0)|^p e^{-gamma (t-t0)}``
for its non-delayed closed loop, the functions here compute the
Gronwall-type growth constants ``K1..K4``, the comparison horizon ``T``,
and the largest delay ``tau_star`` for which the same feedback applied to
the state observed ``tau`` time units ago still yields pth-moment
exponential decay. ``tau_star`` is the unique positive root of

    2^{p0} * (2^{p0} K4(p, tau, T) + K3(p, tau, T)) = 1 - epsilon

with ``p0 = max(0, p - 1)``, which is increasing and continuous in
``tau`` starting from ``-(1 - epsilon) < 0`` at ``tau = 0``, so a
bracket-and-bisect search always finds it.

All constants are evaluated in log space: the exponents scale like
``p * (T + tau) * L`` and overflow the direct formulas long before the
root search is done probing. A value whose logarithm exceeds
``LOG_OVERFLOW_CAP`` is reported as ``inf``, which the root search treats
as "past the root".
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import LipschitzBounds

__all__ = [
    "ThresholdInputs",
    "ThresholdResult",
    "SweepPoint",
    "SweepResult",
    "almost_sure_rate",
    "c_p",
    "decay_rate",
    "horizon_T",
    "k1",
    "k2",
    "k3",
    "k4",
    "optimize_tau_star",
    "p_zero",
    "root_gap",
    "tau_star",
]

#: log threshold above which a constant is reported as +inf
LOG_OVERFLOW_CAP = 700.0

_LOG3 = math.log(3.0)
_LOG4 = math.log(4.0)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def _plog(x: float) -> float:
    """log with log(0) = -inf, for factors that may legitimately vanish."""
    return math.log(x) if x > 0.0 else -math.inf


def _exp_capped(logv: float) -> float:
    if logv > LOG_OVERFLOW_CAP:
        return math.inf
    return math.exp(logv)


def p_zero(p: float) -> float:
    """The exponent ``p0 = max(0, p - 1)`` of the splitting inequality
    ``(a + b)^p <= 2^{p0} (a^p + b^p)``."""
    _require(p > 0.0, f"p must be > 0, got {p}")
    return max(0.0, p - 1.0)


def _log_c_p(p: float) -> float:
    # C_p = (p^{p+1} / (2 (p-1)^{p-1}))^{p/2}
    return 0.5 * p * ((p + 1.0) * math.log(p) - math.log(2.0) - (p - 1.0) * math.log(p - 1.0))


def c_p(p: float) -> float:
    """Burkholder-type martingale moment constant, defined for ``p >= 2``."""
    _require(p >= 2.0, f"c_p requires p >= 2, got {p}")
    return _exp_capped(_log_c_p(p))


def _check_ktriple(p: float, tau: float, T: float) -> None:
    _require(p > 0.0, f"p must be > 0, got {p}")
    _require(tau >= 0.0, f"tau must be >= 0, got {tau}")
    _require(T >= 0.0, f"T must be >= 0, got {T}")


def _log_k1(p: float, tau: float, T: float, lip: LipschitzBounds) -> float:
    rate = lip.l1 + lip.l2 + 0.5 * lip.l3**2 * max(1.0, p - 1.0)
    return min(1.0, 0.5 * p) * math.log1p(tau) + p * (T + tau) * rate


def k1(p: float, tau: float, T: float, lip: LipschitzBounds) -> float:
    """Growth constant bounding ``sup E|x(t)|^p`` over one comparison window:

        K1 = (1 + tau)^{min(1, p/2)} * exp(p (T + tau) (L1 + L2 + 0.5 L3^2 max(1, p-1)))

    For ``p < 2`` this coincides with ``K1(2, tau, T) ** (p/2)``.
    """
    _check_ktriple(p, tau, T)
    return _exp_capped(_log_k1(p, tau, T, lip))


def _log_k2(p: float, tau: float, T: float, lip: LipschitzBounds) -> float:
    l1, l2, l3 = lip.l1, lip.l2, lip.l3
    if p >= 2.0:
        w = T + tau
        terms = [0.0]  # the leading "1 +"
        if w > 0.0:
            terms.append(np.logaddexp(p * _plog(l1), p * _plog(l2)) + p * math.log(w))
            terms.append(_log_c_p(p) + p * _plog(l3) + 0.5 * p * math.log(w))
        inner = terms[0]
        for t in terms[1:]:
            inner = np.logaddexp(inner, t)
        return (p - 1.0) * _LOG4 + _log_k1(p, tau, T, lip) + float(inner)
    # p in (0, 2): (4 K1(2) [(L1^2 + L2^2)(T+tau)^2 + L3^2 (T+tau)])^{p/2};
    # unlike K3/K4 this is *not* the p=2 branch to the power p/2.
    w = T + tau
    if w == 0.0 or (l1 == 0.0 and l2 == 0.0 and l3 == 0.0):
        inner = -math.inf
    else:
        inner = np.logaddexp(_plog(l1**2 + l2**2) + 2.0 * math.log(w), 2.0 * _plog(l3) + math.log(w))
    return 0.5 * p * (_LOG4 + _log_k1(2.0, tau, T, lip) + float(inner))


def k2(p: float, tau: float, T: float, lip: LipschitzBounds) -> float:
    """Constant bounding ``E sup |x(t)|^p`` over one comparison window.

    Branches at ``p = 2``, with the boundary assigned to the ``p >= 2``
    formula; the two branches intentionally disagree there.
    """
    _check_ktriple(p, tau, T)
    return _exp_capped(_log_k2(p, tau, T, lip))


def _log_k3(p: float, tau: float, T: float, lip: LipschitzBounds) -> float:
    if tau == 0.0:
        return -math.inf
    l1, l2, l3 = lip.l1, lip.l2, lip.l3
    if p >= 2.0:
        term1 = np.logaddexp(p * _plog(l1), p * _plog(l2)) + p * math.log(tau)
        term2 = _log_c_p(p) + p * _plog(l3) + 0.5 * p * math.log(tau)
        return (p - 1.0) * _LOG3 + _log_k1(p, tau, T, lip) + float(np.logaddexp(term1, term2))
    # p in (0, 2) equals K3(2, tau, T)^{p/2} exactly (C_2 = 4)
    return 0.5 * p * _log_k3(2.0, tau, T, lip)


def k3(p: float, tau: float, T: float, lip: LipschitzBounds) -> float:
    """Modulus-of-continuity constant: bounds ``E sup_{u<=tau} |x(t+u)-x(t)|^p``.

    Vanishes exactly at ``tau = 0``.
    """
    _check_ktriple(p, tau, T)
    return _exp_capped(_log_k3(p, tau, T, lip))


def _log_k4(p: float, tau: float, T: float, lip: LipschitzBounds) -> float:
    if tau == 0.0:
        return -math.inf
    l1, l2, l3 = lip.l1, lip.l2, lip.l3
    if p >= 2.0:
        rate = p * l1 + (2.0 * p - 1.0) * l2 + 0.5 * p * (p - 1.0) * l3**2
        return (
            _plog(l2)
            + _plog(T + tau)
            + _log_k3(p, tau, T, lip)
            + rate * (T + tau)
        )
    # p in (0, 2) equals K4(2, tau, T)^{p/2} exactly
    return 0.5 * p * _log_k4(2.0, tau, T, lip)


def k4(p: float, tau: float, T: float, lip: LipschitzBounds) -> float:
    """Perturbation constant: bounds ``E|x(t) - y(t)|^p`` between the delayed
    and the non-delayed closed loop started from the same data. Vanishes
    exactly at ``tau = 0`` (through the K3 factor)."""
    _check_ktriple(p, tau, T)
    return _exp_capped(_log_k4(p, tau, T, lip))


@dataclass(frozen=True)
class ThresholdInputs:
    """Everything the delay-threshold calculus needs.

    ``M`` and ``gamma`` quantify the non-delayed closed loop's moment decay
    (``E|y(t)|^p <= M E|y(t0)|^p e^{-gamma (t - t0)}``) and typically come
    from an M-matrix certificate; ``epsilon`` in (0, 1) is the share of the
    contraction budget granted to that decay, the remainder to the delay
    perturbation.
    """

    p: float
    lipschitz: LipschitzBounds
    M: float
    gamma: float
    epsilon: float

    def __post_init__(self) -> None:
        _require(self.p > 0.0, f"p must be > 0, got {self.p}")
        _require(self.M > 0.0, f"M must be > 0, got {self.M}")
        _require(self.gamma > 0.0, f"gamma must be > 0, got {self.gamma}")
        _require(0.0 < self.epsilon < 1.0, f"epsilon must lie in (0, 1), got {self.epsilon}")


@dataclass(frozen=True)
class ThresholdResult:
    horizon: float
    tau_star: float
    decay_rate: float
    residual: float


def horizon_T(p: float, M: float, gamma: float, epsilon: float) -> float:
    """Comparison horizon ``T = (1/gamma) log(2^{2 p0} M / epsilon)``.

    Raises ``ValueError`` when the argument of the log is <= 1 (epsilon too
    large relative to ``2^{2 p0} M``), which would give a nonpositive horizon.
    """
    _require(p > 0.0, f"p must be > 0, got {p}")
    _require(M > 0.0, f"M must be > 0, got {M}")
    _require(gamma > 0.0, f"gamma must be > 0, got {gamma}")
    _require(0.0 < epsilon < 1.0, f"epsilon must lie in (0, 1), got {epsilon}")
    t = (2.0 * p_zero(p) * math.log(2.0) + math.log(M) - math.log(epsilon)) / gamma
    if t <= 0.0:
        raise ValueError(
            f"nonpositive horizon T={t:.3e}: epsilon={epsilon} is too large for M={M}"
        )
    return t


def root_gap(inputs: ThresholdInputs, tau: float, T: float | None = None) -> float:
    """Signed distance to the delay-budget equation at delay ``tau``:

        phi(tau) = 2^{p0} (2^{p0} K4 + K3) - (1 - epsilon)

    Negative means ``tau`` is admissible; the root is ``tau_star``. Strictly
    increasing and continuous in ``tau``, with ``phi(0) = -(1 - epsilon)``.
    """
    if T is None:
        T = horizon_T(inputs.p, inputs.M, inputs.gamma, inputs.epsilon)
    two_p0 = 2.0 ** p_zero(inputs.p)
    k4v = k4(inputs.p, tau, T, inputs.lipschitz)
    k3v = k3(inputs.p, tau, T, inputs.lipschitz)
    return two_p0 * (two_p0 * k4v + k3v) - (1.0 - inputs.epsilon)


def tau_star(inputs: ThresholdInputs, tol: float = 1e-9) -> ThresholdResult:
    """Bracket and bisect the maximal admissible feedback delay.

    The bracket starts at 1e-8 and doubles until the budget is exceeded
    (an overflowing constant counts as exceeded); bisection then runs to
    the floating-point fixed point, which is far inside the requested
    ``tol`` (relative on tau_star). The returned delay sits on the
    admissible side of the root, so the reported residual is <= 0 and the
    decay rate is well defined at it.
    """
    _require(tol > 0.0, f"tol must be > 0, got {tol}")
    T = horizon_T(inputs.p, inputs.M, inputs.gamma, inputs.epsilon)

    hi = 1e-8
    lo = 0.0
    found = False
    for _ in range(4000):
        val = root_gap(inputs, hi, T)
        if val > 0.0:
            found = True
            break
        if val == 0.0:
            lam = decay_rate(inputs, math.nextafter(hi, 0.0), T)
            return ThresholdResult(T, hi, lam, 0.0)
        lo = hi
        hi *= 2.0
    if not found:
        raise ValueError(
            "no delay bracket found: the growth constants never exhaust the "
            "budget (are all Lipschitz constants zero?)"
        )

    while True:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        val = root_gap(inputs, mid, T)
        if val < 0.0:
            lo = mid
        elif val > 0.0:
            hi = mid
        else:
            lo = mid
            break

    residual = root_gap(inputs, lo, T)
    # one tol step back from the root: at lo itself the per-window
    # contraction can round to exactly 1 and the rate to 0
    tau_for_rate = max(lo - tol * max(1.0, lo), 0.0)
    lam = decay_rate(inputs, tau_for_rate, T)
    return ThresholdResult(T, lo, lam, residual)


def decay_rate(inputs: ThresholdInputs, tau: float, T: float | None = None) -> float:
    """pth-moment decay rate achieved at an admissible delay ``tau < tau_star``:

        lambda = -log(epsilon + 2^{p0} (2^{p0} K4 + K3)) / (tau + T)

    Raises ``ValueError`` when ``tau`` is not strictly inside the admissible
    range (the log argument reaches 1).
    """
    _require(tau >= 0.0, f"tau must be >= 0, got {tau}")
    if T is None:
        T = horizon_T(inputs.p, inputs.M, inputs.gamma, inputs.epsilon)
    two_p0 = 2.0 ** p_zero(inputs.p)
    contraction = inputs.epsilon + two_p0 * (
        two_p0 * k4(inputs.p, tau, T, inputs.lipschitz) + k3(inputs.p, tau, T, inputs.lipschitz)
    )
    if not contraction < 1.0:
        raise ValueError(
            f"delay tau={tau} is not admissible (per-window contraction "
            f"{contraction} >= 1); need tau < tau_star"
        )
    return -math.log(contraction) / (tau + T)


def almost_sure_rate(lam: float, p: float) -> float:
    """Almost-sure pathwise decay-rate bound ``lambda / (2 p)`` implied by a
    pth-moment rate ``lambda`` (one-sided: paths decay at least this fast)."""
    _require(p > 0.0, f"p must be > 0, got {p}")
    return lam / (2.0 * p)


@dataclass(frozen=True)
class SweepPoint:
    p: float
    epsilon: float
    M: float
    gamma: float
    horizon: float
    tau_star: float
    decay_rate: float
    residual: float
    error: str | None = None

    @property
    def feasible(self) -> bool:
        return self.error is None


@dataclass(frozen=True)
class SweepResult:
    best: SweepPoint
    table: tuple[SweepPoint, ...]


def _as_map(value) -> Callable[[float], float]:
    if callable(value):
        return value
    return lambda _p, _v=float(value): _v


def optimize_tau_star(
    lipschitz: LipschitzBounds,
    M_of_p,
    gamma_of_p,
    p_grid: Sequence[float],
    epsilon_grid: Sequence[float],
    tol: float = 1e-9,
    workers: int | None = None,
) -> SweepResult:
    """Exhaustive grid search maximising ``tau_star`` over ``(p, epsilon)``.

    ``M_of_p`` and ``gamma_of_p`` are either constants or callables of ``p``
    (a certificate is typically recomputed per ``p``). Grid points where the
    calculus fails (e.g. a nonpositive horizon) are kept in the table with
    their error message and skipped for the argmax. Ties break toward the
    smaller ``epsilon``, then the smaller ``p``, independent of evaluation
    order. Raises ``ValueError`` when every point is infeasible.
    """
    ps = sorted(float(p) for p in p_grid)
    eps = sorted(float(e) for e in epsilon_grid)
    _require(len(ps) > 0 and len(eps) > 0, "p_grid and epsilon_grid must be nonempty")
    m_map, g_map = _as_map(M_of_p), _as_map(gamma_of_p)

    def evaluate(point: tuple[float, float]) -> SweepPoint:
        p, e = point
        try:
            m_val = float(m_map(p))
            g_val = float(g_map(p))
            inputs = ThresholdInputs(p, lipschitz, m_val, g_val, e)
            res = tau_star(inputs, tol)
            return SweepPoint(p, e, m_val, g_val, res.horizon, res.tau_star, res.decay_rate, res.residual)
        except ValueError as exc:
            return SweepPoint(p, e, math.nan, math.nan, math.nan, math.nan, math.nan, math.nan, str(exc))

    grid = [(p, e) for p in ps for e in eps]
    if workers is not None and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            table = list(pool.map(evaluate, grid))
    else:
        table = [evaluate(pt) for pt in grid]

    best: SweepPoint | None = None
    for row in table:
        if not row.feasible:
            continue
        if (
            best is None
            or row.tau_star > best.tau_star
            or (row.tau_star == best.tau_star and (row.epsilon, row.p) < (best.epsilon, best.p))
        ):
            best = row
    if best is None:
        raise ValueError("every grid point was infeasible")
    return SweepResult(best, tuple(table))
