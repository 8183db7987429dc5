"""Delay feedback stabilisation of hybrid stochastic differential equations.

The package answers one engineering question end to end: given a hybrid
SDE stabilised by an instantaneous state feedback, how slowly may the
feedback be allowed to act — i.e. how large a delay ``tau`` in
``u(x(t - tau), r(t), t)`` — before the closed loop can lose pth-moment
exponential stability? It provides

* ``certify``    — M-matrix certificates turning per-mode margins into an
                   explicit moment bound (M, gamma),
* ``thresholds`` — the growth-constant calculus and the maximal
                   admissible delay ``tau_star`` with its decay rate,
* ``markov``     — exact simulation of the switching chain,
* ``simulate``   — Euler-Maruyama Monte Carlo with reproducible parallel
                   substreams, used to validate the certificates,
* ``models``     — the bundled two-mode oscillator and the scalar
                   counterexample showing arbitrarily small delays can
                   destroy stability without such a bound,
* ``cli``        — the ``delaystab`` command-line frontend.
"""

from .core import (
    HybridModel,
    InitialSegment,
    KernelSpec,
    LipschitzBounds,
    ModelEvaluationError,
    ValidationReport,
    validate_model,
)
from .markov import GeneratorMatrix, ModePath, simulate_mode_path, stationary_distribution, validate_generator
from .certify import (
    CertificationError,
    FalsificationReport,
    MMatrixCertificate,
    build_A,
    certify_M_matrix,
    falsify_alpha,
    stability_form,
)
from .thresholds import (
    SweepResult,
    ThresholdInputs,
    ThresholdResult,
    almost_sure_rate,
    c_p,
    decay_rate,
    horizon_T,
    k1,
    k2,
    k3,
    k4,
    optimize_tau_star,
    p_zero,
    root_gap,
    tau_star,
)
from .simulate import (
    MomentEstimate,
    Path,
    SampledPaths,
    SimulationConfig,
    estimate_moment_exponent,
    estimate_pathwise_exponent,
    integrate_path,
    monte_carlo_moment,
    sample_paths,
)
from .models import (
    CounterexampleParams,
    InstabilityDemo,
    InstabilityDemoConfig,
    OscillatorParams,
    REFERENCE_GENERATOR,
    SINGLE_MODE_GENERATOR,
    best_alpha,
    counterexample_initial_segment,
    counterexample_model,
    demonstrate_instability,
    design_oscillator_gains,
    linear_model,
    oscillator_Q,
    oscillator_lipschitz,
    oscillator_margins,
    oscillator_model,
    quadrant_negativity,
    reference_oscillator_params,
    riccati_blowup_time,
    riccati_u,
    zbar,
)

__version__ = "0.1.0"
