"""M-matrix certificates for pth-moment exponential stability.

Given per-mode stability margins ``alpha_i`` (real numbers bounding a
pointwise quadratic form of the closed-loop coefficients) and the
switching generator ``Gamma``, the matrix ``A = diag(alpha) - Gamma``
being a nonsingular M-matrix certifies exponential pth-moment decay of
the non-delayed closed loop with explicit constants

    M = max(theta) / min(theta),   gamma = 1 / max(theta),

where ``theta = A^{-1} (1, ..., 1)^T``. Among Z-matrices (nonpositive
off-diagonals), positivity of every ``theta_i`` is an exact
characterisation of nonsingular M-matrices, and ``theta`` is needed
anyway, so the certificate is one linear solve.

The pointwise margin itself can only be falsified, not certified, for
black-box coefficients; :func:`falsify_alpha` samples states across many
scales and reports the worst violation found.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import HybridModel, as_state, check_mode
from .markov import GeneratorMatrix

__all__ = [
    "CertificationError",
    "FalsificationReport",
    "MMatrixCertificate",
    "build_A",
    "certify_M_matrix",
    "falsify_alpha",
    "stability_form",
]

#: residual tolerance on A @ theta = 1 for an accepted certificate
CERTIFICATE_RESIDUAL_TOL = 1e-10

#: margin violations smaller than this are attributed to rounding
FALSIFY_TOL = 1e-9


class CertificationError(ValueError):
    """The candidate matrix is not a nonsingular M-matrix."""

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


@dataclass(frozen=True)
class MMatrixCertificate:
    """Proof object for the moment bound of the non-delayed closed loop."""

    A: np.ndarray
    theta: np.ndarray
    beta1: float
    beta2: float
    M: float
    gamma: float


def build_A(alpha, gen: GeneratorMatrix) -> np.ndarray:
    """Assemble ``diag(alpha) - Gamma`` from per-mode margins and the generator."""
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim != 1 or a.size != gen.n_modes:
        raise ValueError(
            f"alpha must have one entry per mode, got {a.shape} for {gen.n_modes} modes"
        )
    if not np.all(np.isfinite(a)):
        raise ValueError("alpha has non-finite entries")
    return np.diag(a) - gen.entries


def certify_M_matrix(A) -> MMatrixCertificate:
    """Solve ``A theta = 1`` and grant the certificate iff ``theta > 0``.

    Raises :class:`CertificationError` with reason ``"not-z-matrix"``,
    ``"singular"`` or ``"not-m-matrix"``.
    """
    mat = np.asarray(A, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or mat.shape[0] < 1:
        raise ValueError(f"A must be square, got shape {mat.shape}")
    n = mat.shape[0]
    off = mat[~np.eye(n, dtype=bool)]
    if off.size and off.max() > 0.0:
        raise CertificationError(
            "not-z-matrix", "A has a positive off-diagonal entry; not a Z-matrix"
        )
    ones = np.ones(n)
    try:
        theta = np.linalg.solve(mat, ones)
    except np.linalg.LinAlgError as exc:
        raise CertificationError("singular", f"linear solve failed: {exc}") from exc
    residual = float(np.max(np.abs(mat @ theta - ones)))
    if not np.all(np.isfinite(theta)) or residual > CERTIFICATE_RESIDUAL_TOL:
        raise CertificationError(
            "singular", f"solve is numerically unreliable (residual {residual:.3e})"
        )
    if theta.min() <= 0.0:
        raise CertificationError(
            "not-m-matrix",
            f"theta has a nonpositive entry ({theta.min():.6g}); A is not a "
            "nonsingular M-matrix",
        )
    beta1 = float(theta.min())
    beta2 = float(theta.max())
    theta = theta.copy()
    theta.setflags(write=False)
    mat = mat.copy()
    mat.setflags(write=False)
    return MMatrixCertificate(mat, theta, beta1, beta2, beta2 / beta1, 1.0 / beta2)


def stability_form(model: HybridModel, x, i: int, t: float, p: float) -> float:
    """Pointwise closed-loop stability form whose mode-wise supremum is ``-alpha_i``:

        (p/|x|^2) (x^T [f + u] + 0.5 |g|_F^2) - (p (2-p) / (2 |x|^4)) |x^T g|^2

    ``|g|_F`` is the Frobenius norm of the ``(n, m)`` diffusion matrix and
    ``x^T g`` the induced ``m``-row vector. Undefined at ``x = 0``.
    """
    xv = as_state(x, model.dimension)
    check_mode(i, model.modes)
    if p <= 0.0:
        raise ValueError(f"p must be > 0, got {p}")
    norm_sq = float(xv @ xv)
    if norm_sq == 0.0:
        raise ValueError("stability form is undefined at the zero state")
    f = model.eval_drift(xv, i, t)
    u = model.eval_control(xv, i, t)
    g = model.eval_diffusion(xv, i, t)
    xg = xv @ g
    quad = float(xv @ (f + u)) + 0.5 * float(np.sum(g * g))
    return p / norm_sq * quad - p * (2.0 - p) / (2.0 * norm_sq**2) * float(xg @ xg)


@dataclass(frozen=True)
class FalsificationWitness:
    mode: int
    excess: float
    x: np.ndarray
    t: float


@dataclass(frozen=True)
class FalsificationReport:
    """Worst sampled violation of ``stability_form <= -alpha_i`` per mode.

    ``max_excess[i-1]`` is the largest sampled value of
    ``stability_form + alpha_i`` for mode ``i``; anything above
    ``FALSIFY_TOL`` counts as a falsification and carries a witness.
    Sampling cannot prove the margins hold, only disprove them.
    """

    alpha: np.ndarray
    max_excess: np.ndarray
    witnesses: tuple[FalsificationWitness, ...]
    sample_count: int

    @property
    def falsified(self) -> bool:
        return len(self.witnesses) > 0

    def __str__(self) -> str:
        lines = [
            f"sampled {self.sample_count} states per mode "
            "(sampling falsifies, it does not certify)"
        ]
        for i, exc in enumerate(self.max_excess, start=1):
            verdict = "VIOLATED" if exc > FALSIFY_TOL else "ok"
            lines.append(f"mode {i}: max(form + alpha) = {exc:+.6e}  [{verdict}]")
        for w in self.witnesses:
            lines.append(f"  witness mode {w.mode}: x={w.x}, t={w.t:.6g}, excess={w.excess:.3e}")
        return "\n".join(lines)


def falsify_alpha(
    model: HybridModel,
    alpha,
    p: float,
    sample_count: int = 10_000,
    rng_seed: int = 0,
) -> FalsificationReport:
    """Probe the per-mode margin inequality on random states.

    States are isotropic directions at log-uniform radii in
    ``[1e-6, 1e6]`` (covering both the small- and large-state regimes,
    where homogeneity may fail for nonlinear models) with times
    log-uniform in ``[1e-6, 1e3]``.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    a = np.asarray(alpha, dtype=np.float64)
    if a.size != model.modes:
        raise ValueError(f"alpha must have {model.modes} entries, got {a.size}")
    rng = np.random.default_rng(rng_seed)
    n = model.dimension

    max_excess = np.full(model.modes, -np.inf)
    witnesses: list[FalsificationWitness] = []
    for i in range(1, model.modes + 1):
        worst_x, worst_t = None, 0.0
        for _ in range(sample_count):
            direction = rng.standard_normal(n)
            nrm = np.linalg.norm(direction)
            if nrm == 0.0:
                continue
            x = direction * (10.0 ** rng.uniform(-6.0, 6.0) / nrm)
            t = 10.0 ** rng.uniform(-6.0, 3.0)
            excess = stability_form(model, x, i, t, p) + a[i - 1]
            if excess > max_excess[i - 1]:
                max_excess[i - 1] = excess
                worst_x, worst_t = x, t
        if max_excess[i - 1] > FALSIFY_TOL and worst_x is not None:
            witnesses.append(
                FalsificationWitness(i, float(max_excess[i - 1]), worst_x, worst_t)
            )
    return FalsificationReport(a, max_excess, tuple(witnesses), sample_count)
