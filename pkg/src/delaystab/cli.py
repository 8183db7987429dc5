"""Command-line frontend.

Commands
--------
tau-star         compute the maximal admissible feedback delay (CSV row,
                 or a full (p, epsilon) sweep table with ``--sweep``)
certify          M-matrix certificate from margins and a generator
simulate         integrate sample paths, write per-path CSV (and plots)
moment           Monte Carlo moment estimate, write CSV (and plots)
counterexample   the delayed-feedback blow-up demonstration
reproduce-paper  run the whole reference pipeline and write a manifest
                 comparing every computed number to its reference value

Configuration is a YAML file (see README for the schema); the most common
inputs are also exposed as flags, and the ``figure-5.1/5.2/5.3`` presets
bundle the reference simulation setups at desk scale (``--full-scale``
switches to the reference step sizes).
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path as FsPath

import numpy as np
import yaml

from . import __version__
from .certify import CertificationError, build_A, certify_M_matrix, falsify_alpha
from .core import HybridModel, InitialSegment, LipschitzBounds
from .markov import GeneratorMatrix, validate_generator
from .models import (
    InstabilityDemoConfig,
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
    reference_oscillator_params,
    riccati_blowup_time,
    riccati_u,
    zbar,
)
from .simulate import (
    SimulationConfig,
    estimate_moment_exponent,
    monte_carlo_moment,
    sample_paths,
)
from .thresholds import ThresholdInputs, optimize_tau_star, tau_star

TAU_STAR_HEADER = [
    "p", "epsilon", "L1", "L2", "L3", "M", "gamma", "T", "tau_star", "lambda", "residual",
]

MOMENT_HEADER = ["t", "mean_moment", "std_error", "exploded_count"]

#: desk-scale simulation presets mirroring the reference figures; --full-scale
#: switches step to full_step (the captions' values)
PRESETS = {
    "figure-5.1": dict(mode="uncontrolled", step=1e-4, full_step=1e-5, delay=0.0),
    "figure-5.2": dict(mode="controlled", step=1e-4, full_step=1e-5, delay=0.0),
    "figure-5.3": dict(mode="delayed", step=1e-6, full_step=1e-7, delay=1e-6),
}
_PRESET_COMMON = dict(horizon=20.0, x0=(1.0, 2.0), r0=1, paths=100, moment_order=0.99)


class CliError(ValueError):
    """A config or precondition failure that should abort with exit 1."""


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = FsPath(path)
    if not p.exists():
        raise CliError(f"config file not found: {path}")
    data = yaml.safe_load(p.read_text())
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise CliError("config root must be a mapping")
    return data


def _generator_from(value) -> GeneratorMatrix:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 1:
        n = int(round(math.sqrt(arr.size)))
        if n * n != arr.size:
            raise CliError(f"flat generator needs N^2 entries, got {arr.size}")
        arr = arr.reshape(n, n)
    try:
        return validate_generator(arr)
    except ValueError as exc:
        raise CliError(f"invalid generator: {exc}") from exc


def _build_model(cfg: dict):
    """Build (model, generator, extras) from the ``model`` config section."""
    section = cfg.get("model")
    if not section:
        raise CliError("config needs a 'model' section")
    kind = section.get("type")
    gen_cfg = cfg.get("generator")
    try:
        if kind == "oscillator":
            if "a" in section:
                from .models import OscillatorParams

                gains = section.get("d")
                if gains is None:
                    gains = design_oscillator_gains(float(section.get("design_p", 0.99)))
                params = OscillatorParams(
                    tuple(section["a"]), tuple(section["b"]), tuple(section["c"]), tuple(gains)
                )
            else:
                params = reference_oscillator_params(float(section.get("design_p", 0.99)))
            gen = _generator_from(gen_cfg) if gen_cfg is not None else REFERENCE_GENERATOR
            if gen.n_modes != params.n_modes:
                raise CliError("generator size does not match the oscillator mode count")
            return oscillator_model(params), gen, {"params": params}
        if kind == "linear":
            model = linear_model(section["drift"], section["diffusion"], section["gains"])
            if gen_cfg is None:
                raise CliError("linear models need an explicit 'generator'")
            gen = _generator_from(gen_cfg)
            if gen.n_modes != model.modes:
                raise CliError("generator size does not match the matrix stack")
            return model, gen, {}
        if kind == "counterexample":
            variant = section.get("variant", "controlled")
            eps = section.get("epsilon")
            model = counterexample_model(variant, None if eps is None else float(eps))
            return model, SINGLE_MODE_GENERATOR, {"variant": variant, "epsilon": eps}
    except (KeyError, TypeError) as exc:
        raise CliError(f"malformed model section: {exc}") from exc
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    raise CliError(f"unknown model type {kind!r} (oscillator | linear | counterexample)")


def _build_simulation(cfg: dict, model: HybridModel, overrides: dict):
    section = dict(cfg.get("simulation") or {})
    section.update({k: v for k, v in overrides.items() if v is not None})
    try:
        step = float(section["step"])
        horizon = float(section["horizon"])
    except KeyError as exc:
        raise CliError(f"simulation section is missing {exc}") from exc
    delay = float(section.get("delay", 0.0))
    record_count = int(section.get("record_count", 1000))
    sim = SimulationConfig(
        step=step,
        horizon=horizon,
        delay=delay,
        path_count=int(section.get("paths", 1)),
        master_seed=int(section.get("seed", 0)),
        moment_order=float(section.get("moment_order", 2.0)),
        record_times=np.linspace(0.0, horizon, record_count),
        explosion_cap=float(section.get("explosion_cap", 1e12)),
    )
    x0 = section.get("initial_state")
    if x0 is None:
        raise CliError("simulation section needs 'initial_state'")
    mode0 = int(section.get("initial_mode", 1))
    if sim.delay_steps > 0:
        segment = InitialSegment.from_constant(x0, sim.delay_rounded, sim.step, mode0)
    else:
        segment = InitialSegment.from_constant(x0, initial_mode=mode0)
    return sim, segment, section.get("mode", "controlled")


def _write_csv(path: FsPath, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# tau-star
# ---------------------------------------------------------------------------


def _threshold_inputs(cfg: dict, args) -> ThresholdInputs:
    section = dict(cfg.get("thresholds") or {})
    for key in ("p", "epsilon", "l1", "l2", "l3", "M", "gamma"):
        v = getattr(args, key if key in ("p", "epsilon") else key.lower(), None)
        if v is not None:
            section[key] = v
    p = section.get("p")
    epsilon = section.get("epsilon")
    if p is None or epsilon is None:
        raise CliError("tau-star needs p and epsilon (flags or [thresholds] section)")
    p = float(p)
    epsilon = float(epsilon)

    if all(k in section for k in ("l1", "l2", "l3")):
        lip = LipschitzBounds(float(section["l1"]), float(section["l2"]), float(section["l3"]))
    elif cfg.get("model", {}).get("type") == "oscillator" or args.model_preset == "oscillator":
        params = reference_oscillator_params(p) if args.model_preset == "oscillator" else _build_model(cfg)[2]["params"]
        lip = oscillator_lipschitz(params)
    else:
        raise CliError("tau-star needs L1, L2, L3 (or an oscillator model to derive them)")

    if "M" in section and "gamma" in section:
        M, gamma = float(section["M"]), float(section["gamma"])
    else:
        M, gamma = _certified_mg(p, cfg, args)
    try:
        return ThresholdInputs(p, lip, M, gamma, epsilon)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _certified_mg(p: float, cfg: dict, args) -> tuple[float, float]:
    """Derive (M, gamma) from the oscillator certificate at moment order p."""
    if args.model_preset == "oscillator" or cfg.get("model", {}).get("type") == "oscillator":
        if args.model_preset == "oscillator":
            params = reference_oscillator_params(p)
            gen = REFERENCE_GENERATOR
        else:
            model, gen, extras = _build_model(cfg)
            params = extras["params"].with_gains(design_oscillator_gains(p))
        if not getattr(params, "n_modes", 0):
            raise CliError("cannot derive a certificate for this model")
        alphas = oscillator_margins(p, params, decimals=4)
        cert = certify_M_matrix(build_A(alphas, gen))
        return cert.M, cert.gamma
    raise CliError("tau-star needs M and gamma (or an oscillator model whose certificate supplies them)")


def _parse_grid(spec: str, name: str) -> np.ndarray:
    try:
        key, rng = spec.split("=")
        lo, hi, step = (float(v) for v in rng.split(":"))
    except ValueError as exc:
        raise CliError(f"bad sweep spec {spec!r}, expected {name}=lo:hi:step") from exc
    if key != name:
        raise CliError(f"expected sweep spec for {name!r}, got {key!r}")
    n = int(round((hi - lo) / step)) + 1
    grid = lo + step * np.arange(n)
    grid = grid[(grid > 0.0) & (grid < 1.0)]
    if grid.size == 0:
        raise CliError(f"sweep grid for {name} is empty inside (0, 1)")
    return grid


def cmd_tau_star(args) -> int:
    cfg = _load_config(args.config)
    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.sweep:
        p_grid = _parse_grid(args.sweep[0], "p")
        e_grid = _parse_grid(args.sweep[1], "eps")
        base = _threshold_inputs_for_sweep(cfg, args)
        lip = base["lipschitz"]
        result = optimize_tau_star(lip, base["M_of_p"], base["gamma_of_p"], p_grid, e_grid, args.tol)
        rows = []
        for pt in result.table:
            rows.append(
                [
                    _fmt(pt.p), _fmt(pt.epsilon), _fmt(lip.l1), _fmt(lip.l2), _fmt(lip.l3),
                    _fmt(pt.M), _fmt(pt.gamma), _fmt(pt.horizon), _fmt(pt.tau_star),
                    _fmt(pt.decay_rate), _fmt(pt.residual),
                ]
                if pt.feasible
                else [_fmt(pt.p), _fmt(pt.epsilon)] + [""] * 8 + [pt.error]
            )
        _write_csv(out / "tau_star_sweep.csv", TAU_STAR_HEADER, rows)
        b = result.best
        print(
            f"sweep over {len(result.table)} points -> best tau_star = {b.tau_star:.6e} "
            f"at p = {b.p:g}, epsilon = {b.epsilon:g} (lambda = {b.decay_rate:.6e})"
        )
        print(f"wrote {out / 'tau_star_sweep.csv'}")
        return 0

    inputs = _threshold_inputs(cfg, args)
    res = tau_star(inputs, args.tol)
    lip = inputs.lipschitz
    row = [
        _fmt(inputs.p), _fmt(inputs.epsilon), _fmt(lip.l1), _fmt(lip.l2), _fmt(lip.l3),
        _fmt(inputs.M), _fmt(inputs.gamma), _fmt(res.horizon), _fmt(res.tau_star),
        _fmt(res.decay_rate), _fmt(res.residual),
    ]
    _write_csv(out / "tau_star.csv", TAU_STAR_HEADER, [row])
    print(f"T        = {res.horizon:.7f}")
    print(f"tau_star = {res.tau_star:.6e}")
    print(f"lambda   = {res.decay_rate:.6e}  (almost-sure rate bound {res.decay_rate / (2 * inputs.p):.6e})")
    print(f"wrote {out / 'tau_star.csv'}")
    return 0


def _threshold_inputs_for_sweep(cfg: dict, args) -> dict:
    """Sweeps recompute the certificate per p for oscillator-backed runs."""
    section = dict(cfg.get("thresholds") or {})
    oscillator = args.model_preset == "oscillator" or cfg.get("model", {}).get("type") == "oscillator"
    if oscillator:
        def m_of_p(p: float) -> float:
            alphas = oscillator_margins(p, reference_oscillator_params(p), decimals=4)
            return certify_M_matrix(build_A(alphas, REFERENCE_GENERATOR)).M

        def g_of_p(p: float) -> float:
            alphas = oscillator_margins(p, reference_oscillator_params(p), decimals=4)
            return certify_M_matrix(build_A(alphas, REFERENCE_GENERATOR)).gamma

        lip = oscillator_lipschitz(reference_oscillator_params(0.99))
        return {"lipschitz": lip, "M_of_p": m_of_p, "gamma_of_p": g_of_p}
    needed = ("l1", "l2", "l3", "M", "gamma")
    if not all(k in section for k in needed):
        raise CliError("sweep needs L1, L2, L3, M, gamma (or an oscillator model)")
    lip = LipschitzBounds(float(section["l1"]), float(section["l2"]), float(section["l3"]))
    return {"lipschitz": lip, "M_of_p": float(section["M"]), "gamma_of_p": float(section["gamma"])}


# ---------------------------------------------------------------------------
# certify
# ---------------------------------------------------------------------------


def cmd_certify(args) -> int:
    cfg = _load_config(args.config)
    section = dict(cfg.get("certify") or {})
    alphas = args.alpha if args.alpha is not None else section.get("alpha")
    if alphas is None:
        raise CliError("certify needs per-mode margins (--alpha or [certify] alpha)")
    alphas = np.asarray([float(a) for a in alphas], dtype=np.float64)
    gen_value = args.generator if args.generator is not None else cfg.get("generator")
    if gen_value is None:
        raise CliError("certify needs a generator (--generator or config)")
    gen = _generator_from(gen_value)

    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cert = certify_M_matrix(build_A(alphas, gen))
    except CertificationError as exc:
        print(f"certificate REJECTED ({exc.reason}): {exc}", file=sys.stderr)
        return 1

    n = cert.theta.size
    header = [f"theta_{i}" for i in range(1, n + 1)] + ["beta1", "beta2", "M", "gamma"]
    row = [_fmt(v) for v in cert.theta] + [_fmt(cert.beta1), _fmt(cert.beta2), _fmt(cert.M), _fmt(cert.gamma)]
    _write_csv(out / "certificate.csv", header, [row])
    print("nonsingular M-matrix certificate granted")
    for i, th in enumerate(cert.theta, start=1):
        print(f"  theta_{i} = {th:.6f}")
    print(f"  M = {cert.M:.6f}")
    print(f"  gamma = {cert.gamma:.7f}")
    print(f"wrote {out / 'certificate.csv'}")

    if args.falsify:
        model, _, extras = _build_model(cfg) if cfg.get("model") else (None, None, {})
        if model is None:
            if args.model_preset == "oscillator":
                model = oscillator_model(reference_oscillator_params(float(args.p or 0.99)))
            else:
                raise CliError("--falsify needs a model in the config (or --model-preset oscillator)")
        p = float(args.p if args.p is not None else cfg.get("thresholds", {}).get("p", 0.99))
        report = falsify_alpha(model, alphas, p, args.falsify, rng_seed=args.seed or 0)
        print()
        print("margin falsification sampling (cannot prove the margins, only disprove):")
        print(report)
        if report.falsified:
            return 1
    return 0


# ---------------------------------------------------------------------------
# simulate / moment
# ---------------------------------------------------------------------------


def _resolve_run(args):
    """Common model+simulation resolution for simulate/moment."""
    cfg = _load_config(args.config)
    overrides = {
        "step": args.step,
        "horizon": args.horizon,
        "paths": args.paths,
        "seed": args.seed,
        "moment_order": args.moment_order,
    }
    if args.preset:
        if args.preset not in PRESETS:
            raise CliError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        spec = {**_PRESET_COMMON, **PRESETS[args.preset]}
        step = spec["full_step"] if args.full_scale else spec["step"]
        model = oscillator_model(reference_oscillator_params(0.99))
        gen = REFERENCE_GENERATOR
        sim = SimulationConfig(
            step=overrides["step"] or step,
            horizon=overrides["horizon"] or spec["horizon"],
            delay=spec["delay"],
            path_count=overrides["paths"] or spec["paths"],
            master_seed=overrides["seed"] if overrides["seed"] is not None else 0,
            moment_order=overrides["moment_order"] or spec["moment_order"],
        )
        if sim.delay_steps > 0:
            segment = InitialSegment.from_constant(spec["x0"], sim.delay_rounded, sim.step, spec["r0"])
        else:
            segment = InitialSegment.from_constant(spec["x0"], initial_mode=spec["r0"])
        return model, gen, sim, segment, spec["mode"]
    if not cfg:
        raise CliError("provide --preset or --config")
    model, gen, _ = _build_model(cfg)
    sim, segment, mode = _build_simulation(cfg, model, overrides)
    if args.mode:
        mode = args.mode
    return model, gen, sim, segment, mode


def cmd_simulate(args) -> int:
    model, gen, sim, segment, mode = _resolve_run(args)
    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    batch = sample_paths(model, gen, segment, sim, mode)
    n = model.dimension
    header = ["t"] + [f"x_{j}" for j in range(1, n + 1)] + ["mode"]
    for pidx in range(batch.path_count):
        rows = []
        for r, t in enumerate(batch.times):
            rows.append(
                [_fmt(t)] + [_fmt(v) for v in batch.states[r, pidx]] + [str(int(batch.modes[r, pidx]))]
            )
        _write_csv(out / f"path_{pidx:03d}.csv", header, rows)
    exploded = int(np.sum(np.isfinite(batch.exploded_at)))
    print(
        f"simulated {batch.path_count} path(s), mode={mode}, step={sim.step:g}, "
        f"horizon={sim.horizon:g}, exploded={exploded}"
    )
    print(f"wrote {batch.path_count} CSV file(s) to {out}")
    if args.plot:
        _plot_paths(out, batch, n)
    return 0


def _plot_paths(out: FsPath, batch, n: int) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for pidx in range(batch.path_count):
        fig, (ax0, ax1) = plt.subplots(
            2, 1, sharex=True, figsize=(9, 6), height_ratios=[3, 1]
        )
        for j in range(n):
            ax0.plot(batch.times, batch.states[:, pidx, j], lw=0.8, label=f"x_{j + 1}")
        ax0.legend(loc="upper right")
        ax0.set_ylabel("state")
        ax1.step(batch.times, batch.modes[:, pidx], where="post", lw=0.9)
        ax1.set_ylabel("mode")
        ax1.set_xlabel("t")
        ax1.set_yticks(sorted(set(int(m) for m in batch.modes[:, pidx])))
        fig.tight_layout()
        fig.savefig(out / f"path_{pidx:03d}.svg")
        plt.close(fig)
    print(f"wrote {batch.path_count} plot(s) to {out}")


def cmd_moment(args) -> int:
    model, gen, sim, segment, mode = _resolve_run(args)
    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    est = monte_carlo_moment(model, gen, segment, sim, mode)
    rows = [
        [_fmt(t), _fmt(m), _fmt(s), str(int(c))]
        for t, m, s, c in zip(est.times, est.mean_moment, est.std_error, est.exploded_count)
    ]
    _write_csv(out / "moment.csv", MOMENT_HEADER, rows)
    print(
        f"E|x(t)|^{est.moment_order:g} over {est.path_count} paths, mode={mode}: "
        f"m(0)={est.mean_moment[0]:.6e}, m(T)={est.mean_moment[-1]:.6e}, "
        f"exploded={int(est.exploded_count[-1])}"
    )
    if args.window:
        slope = estimate_moment_exponent(est, tuple(args.window))
        print(f"moment exponent on {args.window}: {slope:+.6f} (1/time)")
    print(f"wrote {out / 'moment.csv'}")
    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(8, 5))
        ax.semilogy(est.times, est.mean_moment, lw=1.0)
        ax.fill_between(
            est.times,
            np.maximum(est.mean_moment - 2 * est.std_error, 1e-300),
            est.mean_moment + 2 * est.std_error,
            alpha=0.25,
            lw=0,
        )
        ax.set_xlabel("t")
        ax.set_ylabel(f"E|x(t)|^{est.moment_order:g}")
        fig.tight_layout()
        fig.savefig(out / "moment.svg")
        plt.close(fig)
        print(f"wrote {out / 'moment.svg'}")
    return 0


# ---------------------------------------------------------------------------
# counterexample
# ---------------------------------------------------------------------------


def cmd_counterexample(args) -> int:
    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = InstabilityDemoConfig(
        delayed_paths=args.paths,
        delayed_step=args.step,
        moment_paths=args.moment_paths,
        moment_step=args.moment_step,
        master_seed=args.seed,
    )
    demo = demonstrate_instability(args.epsilon, config)
    rows = [
        [_fmt(t), _fmt(m), _fmt(s), str(int(c)), _fmt(u)]
        for t, m, s, c, u in zip(
            demo.delayed_times,
            demo.delayed_second_moment,
            demo.delayed_std_error,
            demo.delayed_exploded_count,
            demo.riccati_curve,
        )
    ]
    _write_csv(out / "delayed_second_moment.csv", MOMENT_HEADER + ["riccati_lower_bound"], rows)
    rows4 = [[_fmt(t), _fmt(m)] for t, m in zip(demo.controlled_times, demo.controlled_fourth_moment)]
    _write_csv(out / "controlled_fourth_moment.csv", ["t", "mean_moment"], rows4)
    print(demo)
    print(f"wrote {out / 'delayed_second_moment.csv'} and {out / 'controlled_fourth_moment.csv'}")
    return 0


# ---------------------------------------------------------------------------
# reproduce-paper
# ---------------------------------------------------------------------------


@dataclass
class Check:
    name: str
    computed: str
    expected: str
    passed: bool
    stochastic: bool = False

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        kind = "monte-carlo" if self.stochastic else "deterministic"
        return f"[{tag}] {self.name:34s} computed={self.computed} expected={self.expected} ({kind})"


REFERENCE_Q1 = np.array([[-0.3848, -0.4724], [-0.4724, -0.3848]])
REFERENCE_Q2 = np.array([[-0.4650, -0.0012], [-0.0012, -0.0013]])
REFERENCE_ALPHA = (0.3848, 0.0012)
REFERENCE_A = np.array([[1.3848, -1.0], [-2.0, 2.0012]])
REFERENCE_THETA = (3.891286, 4.388653)
REFERENCE_M = 1.127816
REFERENCE_GAMMA = 0.2278604
REFERENCE_T = 0.7994283
REFERENCE_TAU_STAR = 2.93e-6


def _close(a, b, tol) -> bool:
    return bool(np.all(np.abs(np.asarray(a) - np.asarray(b)) <= tol))


def _rel_close(a, b, rel) -> bool:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return bool(np.all(np.abs(a - b) <= rel * np.abs(b)))


def cmd_reproduce(args) -> int:
    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed
    checks: list[Check] = []
    t_start = time.time()

    def add(name, computed, expected, passed, stochastic=False):
        checks.append(Check(name, computed, expected, bool(passed), stochastic))

    # -- stage 1: gain design and design matrices ---------------------------
    d1, d2 = design_oscillator_gains(0.99)
    add("gain_d1", _fmt(d1), "0.4848 (4 dp)", _close(d1, 0.4848, 5e-5 + 1e-12))
    add("gain_d2", _fmt(d2), "0.5650 (4 dp)", _close(d2, 0.5650, 5e-5 + 1e-12))
    params = reference_oscillator_params(0.99)
    q1 = oscillator_Q(1, 0.99, params)
    q2 = oscillator_Q(2, 0.99, params)
    add("design_matrix_Q1", np.array2string(q1, precision=6), "reference entries (4 dp)",
        _close(q1, REFERENCE_Q1, 5e-5 + 1e-12))
    add("design_matrix_Q2", np.array2string(q2, precision=6), "reference entries (4 dp)",
        _close(q2, REFERENCE_Q2, 5e-5 + 1e-12))

    # -- stage 2: margins and certificate -----------------------------------
    alphas = oscillator_margins(0.99, params, decimals=4)
    add("margins_alpha", np.array2string(alphas, precision=6), f"{REFERENCE_ALPHA}",
        _close(alphas, REFERENCE_ALPHA, 1e-9))
    a_mat = build_A(alphas, REFERENCE_GENERATOR)
    add("certificate_matrix_A", np.array2string(a_mat, precision=6), "reference entries",
        _close(a_mat, REFERENCE_A, 1e-9))
    cert = certify_M_matrix(a_mat)
    add("certificate_theta", np.array2string(cert.theta, precision=7), f"{REFERENCE_THETA} (5 sig)",
        _rel_close(cert.theta, REFERENCE_THETA, 5e-6))
    add("certificate_M", _fmt(cert.M), f"{REFERENCE_M} (5 sig)", _rel_close(cert.M, REFERENCE_M, 5e-6))
    add("certificate_gamma", _fmt(cert.gamma), f"{REFERENCE_GAMMA} (5 sig)",
        _rel_close(cert.gamma, REFERENCE_GAMMA, 5e-6))

    # -- stage 3: horizon and maximal delay ----------------------------------
    lip = oscillator_lipschitz(params)
    inputs = ThresholdInputs(0.99, lip, cert.M, cert.gamma, 0.94)
    res = tau_star(inputs)
    add("horizon_T", _fmt(res.horizon), f"{REFERENCE_T} +- 5e-4", _close(res.horizon, REFERENCE_T, 5e-4))
    add("tau_star", _fmt(res.tau_star), f"{REFERENCE_TAU_STAR} +- 2%",
        _rel_close(res.tau_star, REFERENCE_TAU_STAR, 0.02))
    add("tau_star_residual", _fmt(res.residual), "|.| <= 1e-9", abs(res.residual) <= 1e-9)
    row = [
        _fmt(0.99), _fmt(0.94), _fmt(lip.l1), _fmt(lip.l2), _fmt(lip.l3), _fmt(cert.M),
        _fmt(cert.gamma), _fmt(res.horizon), _fmt(res.tau_star), _fmt(res.decay_rate), _fmt(res.residual),
    ]
    _write_csv(out / "tau_star.csv", TAU_STAR_HEADER, [row])

    # -- stage 4: the three reference simulations ---------------------------
    model = oscillator_model(params)
    horizon = args.horizon
    window = (horizon / 4.0, horizon)
    x0 = (1.0, 2.0)
    slopes = {}
    for name, mode, step, delay in (
        ("figure-5.1", "uncontrolled", args.sim_step, 0.0),
        ("figure-5.2", "controlled", args.sim_step, 0.0),
        ("figure-5.3", "delayed", 1e-6, 1e-6),
    ):
        sim = SimulationConfig(
            step=step, horizon=horizon, delay=delay, path_count=args.paths,
            master_seed=seed, moment_order=0.99,
        )
        if sim.delay_steps > 0:
            seg = InitialSegment.from_constant(x0, sim.delay_rounded, sim.step, 1)
        else:
            seg = InitialSegment.from_constant(x0, initial_mode=1)
        est = monte_carlo_moment(model, REFERENCE_GENERATOR, seg, sim, mode)
        slopes[name] = estimate_moment_exponent(est, window)
        rows = [
            [_fmt(t), _fmt(m), _fmt(s), str(int(c))]
            for t, m, s, c in zip(est.times, est.mean_moment, est.std_error, est.exploded_count)
        ]
        _write_csv(out / f"moment_{name}.csv", MOMENT_HEADER, rows)
    add("uncontrolled_moment_slope", _fmt(slopes["figure-5.1"]), ">= 0 (reference claims instability)",
        slopes["figure-5.1"] >= 0.0, stochastic=True)
    add("controlled_moment_slope", _fmt(slopes["figure-5.2"]), "< 0", slopes["figure-5.2"] < 0.0,
        stochastic=True)
    add("delayed_moment_slope", _fmt(slopes["figure-5.3"]), "< 0", slopes["figure-5.3"] < 0.0,
        stochastic=True)

    # -- stage 5: counterexample --------------------------------------------
    z = zbar(0.1)
    add("zbar_0.1", _fmt(z), "3.96 +- 0.02", _close(z, 3.96, 0.02))
    tstar = riccati_blowup_time(z)
    add("riccati_blowup_time", _fmt(tstar), "epsilon = 0.1 (1e-9 rel)", _rel_close(tstar, 0.1, 1e-9))
    demo = demonstrate_instability(
        0.1,
        InstabilityDemoConfig(
            delayed_paths=args.counterexample_paths,
            moment_paths=args.counterexample_paths * 5,
            master_seed=seed + 100,
        ),
    )
    add("delayed_cap_fraction", _fmt(demo.cap_fraction), "> 0", demo.cap_fraction > 0.0, stochastic=True)
    add("controlled_fourth_moment_at_1", _fmt(demo.controlled_moment_at_one), "<= 1.2 e^-4",
        demo.controlled_moment_at_one <= 1.2 * math.exp(-4.0), stochastic=True)
    add("uncontrolled_fourth_moment_slope", _fmt(demo.uncontrolled_slope), "> -4",
        demo.uncontrolled_slope > -4.0, stochastic=True)

    # -- manifest -------------------------------------------------------------
    n_pass = sum(c.passed for c in checks)
    lines = [
        "delaystab reference reproduction manifest",
        f"seed = {seed}, paths = {args.paths}, horizon = {args.horizon:g}, sim step = {args.sim_step:g}",
        "",
    ]
    lines.extend(c.line() for c in checks)
    lines.append("")
    lines.append(f"{n_pass}/{len(checks)} checks passed")
    manifest = "\n".join(lines) + "\n"
    (out / "manifest.txt").write_text(manifest)
    print(manifest, end="")
    print(f"wrote {out / 'manifest.txt'}  ({time.time() - t_start:.1f} s)")
    return 0 if n_pass == len(checks) else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _add_common_run_args(sp) -> None:
    sp.add_argument("--config", help="YAML config file")
    sp.add_argument("--preset", help="figure-5.1 | figure-5.2 | figure-5.3")
    sp.add_argument("--full-scale", action="store_true", help="use the reference step sizes")
    sp.add_argument("--mode", choices=["uncontrolled", "controlled", "delayed"], help="override run mode")
    sp.add_argument("--step", type=float)
    sp.add_argument("--horizon", type=float)
    sp.add_argument("--paths", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--moment-order", type=float, dest="moment_order")
    sp.add_argument("--out", default=".", help="output directory")
    sp.add_argument("--plot", action="store_true", help="also write SVG plots")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="delaystab",
        description="Delay feedback stabilisation toolkit for hybrid stochastic differential equations",
    )
    ap.add_argument("--version", action="version", version=f"delaystab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("tau-star", help="maximal admissible feedback delay")
    sp.add_argument("--config", help="YAML config file")
    sp.add_argument("--model-preset", choices=["oscillator"], help="derive bounds/certificate from a bundled model")
    sp.add_argument("--p", type=float)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--l1", type=float)
    sp.add_argument("--l2", type=float)
    sp.add_argument("--l3", type=float)
    sp.add_argument("--m-bound", type=float, dest="m")
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--tol", type=float, default=1e-9)
    sp.add_argument("--sweep", nargs=2, metavar=("p=lo:hi:step", "eps=lo:hi:step"))
    sp.add_argument("--out", default=".")
    sp.set_defaults(func=cmd_tau_star)

    sp = sub.add_parser("certify", help="M-matrix certificate from margins + generator")
    sp.add_argument("--config")
    sp.add_argument("--alpha", type=lambda s: s.split(","), help="comma-separated per-mode margins")
    sp.add_argument("--generator", type=lambda s: [float(v) for v in s.split(",")],
                    help="row-major comma-separated N^2 rates")
    sp.add_argument("--falsify", type=int, metavar="N", help="sample N states per mode against the margins")
    sp.add_argument("--model-preset", choices=["oscillator"])
    sp.add_argument("--p", type=float, help="moment order for --falsify")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", default=".")
    sp.set_defaults(func=cmd_certify)

    sp = sub.add_parser("simulate", help="integrate sample paths, write per-path CSV")
    _add_common_run_args(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("moment", help="Monte Carlo moment estimate, write CSV")
    _add_common_run_args(sp)
    sp.add_argument("--window", nargs=2, type=float, metavar=("A", "B"),
                    help="report the moment exponent on [A, B]")
    sp.set_defaults(func=cmd_moment)

    sp = sub.add_parser("counterexample", help="delayed-feedback blow-up demonstration")
    sp.add_argument("--epsilon", type=float, default=0.1)
    sp.add_argument("--paths", type=int, default=2000, help="paths for the delayed run")
    sp.add_argument("--step", type=float, default=1e-5, help="step for the delayed run")
    sp.add_argument("--moment-paths", type=int, default=10_000, dest="moment_paths")
    sp.add_argument("--moment-step", type=float, default=1e-3, dest="moment_step")
    sp.add_argument("--seed", type=int, default=2024)
    sp.add_argument("--out", default=".")
    sp.set_defaults(func=cmd_counterexample)

    sp = sub.add_parser("reproduce-paper", help="full reference pipeline with pass/fail manifest")
    sp.add_argument("--out", default="reproduction")
    sp.add_argument("--seed", type=int, default=11)
    sp.add_argument("--paths", type=int, default=100, help="paths per simulation stage")
    sp.add_argument("--horizon", type=float, default=20.0, help="simulation horizon")
    sp.add_argument("--sim-step", type=float, default=1e-4, dest="sim_step",
                    help="step for the non-delayed simulation stages")
    sp.add_argument("--counterexample-paths", type=int, default=2000, dest="counterexample_paths")
    sp.set_defaults(func=cmd_reproduce)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
