"""Study stages over an artifact directory.

Every stage reads only the artifacts it declares and writes a `<stage>.json`
whose "diagnostics" entry feeds the final report.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from shared.types import (
    BoundReport,
    BoundSpec,
    BoundVariant,
    DiagnosticLine,
    IterateHistory,
    KernelKind,
    LinearModel,
    MixingRegime,
    ReluNetwork,
    StepSchedule,
    StudyReport,
    TransitionKernel,
    Trajectory,
    Verdict,
)
from tdmix import __version__
from tdmix import approx, chain, decomp, depend, io, plots, rates, relu_diag, td
from tdmix.config import DiagnosticsConfig, ExperimentConfig, config_hash, default_threads
from tdmix.errors import InsufficientSeeds, MissingArtifact, TdMixError, TrajectoryTooShort, WindowTooSmall
from tdmix.seeding import derive_seed, derive_seeds, generator

logger = logging.getLogger(__name__)

STAGES = (
    "simulate",
    "train",
    "decompose",
    "mixing",
    "couple",
    "blocks",
    "crossings",
    "rates",
)
REPORT_INPUTS = tuple(f"{stage}.json" for stage in STAGES)
RECONSTRUCTION_TOL = 1e-10
PLATEAU_SHARE = 0.05
VIOLATION_RATE = 0.01

KERNEL = "kernel.json"
MODEL0 = "model0.json"
FIXED_POINT = "fixed_point.json"
HISTORY_DIR = "histories"


def _line(name: str, verdict: Verdict, detail: str = "") -> Dict[str, str]:
    return DiagnosticLine(name=name, verdict=verdict, detail=detail).model_dump(mode="json")


def _verdict(ok: bool) -> Verdict:
    return Verdict.PASS if ok else Verdict.FAIL


def _parallel_map(fn: Callable, items: Sequence, threads: int) -> List:
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def history_paths(out_dir: Path, index: int) -> Tuple[Path, Path]:
    stem = out_dir / HISTORY_DIR / f"history_{index:04d}"
    return stem.with_suffix(".csv"), stem.with_suffix(".json")


# Builders
def build_kernel(config: ExperimentConfig) -> TransitionKernel:
    spec = config.chain
    if spec.kind == KernelKind.RENEWAL:
        return chain.make_renewal_chain(spec.kappa, spec.n_states)
    if spec.kind == KernelKind.TWO_STATE:
        return chain.make_two_state(spec.p, spec.q, spec.rewards or (1.0, 0.0))
    if spec.kind == KernelKind.IID:
        return chain.make_iid_chain(spec.distribution, spec.rewards)
    if spec.kind == KernelKind.RANDOM:
        return chain.make_random_kernel(spec.n_states, spec.seed, spec.rewards)
    if spec.kind == KernelKind.LAZY:
        return chain.make_lazy(chain.make_renewal_chain(spec.kappa, spec.n_states), spec.holding)
    return chain.make_kernel(spec.P, spec.rewards, r_max=spec.r_max)


def build_model(config: ExperimentConfig, kernel: TransitionKernel, seed: int):
    spec = config.model
    if spec.kind == "linear":
        if spec.features == "tabular":
            features = approx.tabular_features(kernel.n_states)
        else:
            features = approx.random_features(kernel.n_states, spec.dim or 4, seed)
        return approx.make_linear_model(features)
    return approx.init_relu_network(
        kernel.n_states,
        hidden=spec.hidden,
        budget=spec.budget,
        x_max=spec.x_max,
        embedding_kind=spec.embedding,
        seed=seed,
        init_scale=spec.init_scale,
    )


def _schedule(config: ExperimentConfig) -> StepSchedule:
    return StepSchedule(c_alpha=config.schedule.c_alpha, eta=config.schedule.eta)


def _train_one(
    seed: int,
    kernel: TransitionKernel,
    model0,
    schedule: StepSchedule,
    discount: float,
    T: int,
    checkpoint_every: Optional[int],
    start,
    record_stream: bool,
) -> IterateHistory:
    return td.run_td(
        kernel,
        model0,
        schedule,
        discount,
        T,
        seed,
        checkpoint_every=checkpoint_every,
        start=start,
        record_stream=record_stream,
    )


def _load_histories(out_dir: Path) -> List[IterateHistory]:
    summary = io.read_json(out_dir / "train.json")
    return [io.load_history(*history_paths(out_dir, index)) for index in range(summary["n_histories"])]


# Stages
def stage_simulate(config: ExperimentConfig, out_dir: Path, threads: int) -> dict:
    kernel = build_kernel(config)
    io.save_kernel(out_dir / KERNEL, kernel)
    trajectory = chain.sample_trajectory(
        kernel, config.start, config.T, derive_seed(config.seeds.base_seed, "trajectory", 0)
    )
    io.save_trajectory(out_dir / "trajectory.csv", trajectory)

    lines = []
    payload: dict = {"kernel_id": kernel.kernel_id, "n_states": kernel.n_states}
    if kernel.kind == KernelKind.RENEWAL:
        kappa = config.chain.kappa
        V = np.arange(1, kernel.n_states + 1, dtype=float) ** (kappa - 0.5)
        W = V ** ((kappa - 1.5) / (kappa - 0.5))
        certificates = chain.scan_drift(kernel, V, W, [0.1, 0.25, 0.5, 1.0])
        best = min(certificates, key=lambda cert: cert.b)
        payload["drift"] = [{"lam": cert.lam, "b": cert.b, "valid": cert.valid} for cert in certificates]
        lines.append(
            _line(
                "lyapunov-drift",
                _verdict(all(cert.valid for cert in certificates)),
                f"lambda={best.lam:g} b={best.b:.4g} over {kernel.n_states} states",
            )
        )
    else:
        lines.append(_line("lyapunov-drift", Verdict.NA, f"no drift function for {kernel.kind.value} chains"))
    payload["diagnostics"] = lines
    io.write_json(out_dir / "simulate.json", payload)
    return payload


def stage_mixing(config: ExperimentConfig, out_dir: Path, threads: int) -> dict:
    kernel = io.load_kernel(out_dir / KERNEL)
    window = config.windows.mixing
    lags = depend.lag_grid(1, 2 * window[1])
    tv = depend.tv_mixing(kernel, 0, lags, window)
    cov = depend.covariance_mixing(kernel, kernel.rewards, kernel.rewards, lags, window)
    blocks = depend.block_independence_curve(kernel, lags, window)
    io.save_series(out_dir / "mixing.csv", lag=lags, tv=tv.values, cov=cov.values, block_tv=blocks.values)
    plots.loglog_plot(
        out_dir / "mixing.svg",
        lags,
        {"TV from state 0": tv.values, "|lag covariance|": cov.values, "worst-start TV": blocks.values},
        reference_slopes=[config.beta_nominal],
        title="Mixing curves",
    )

    lines = []
    if tv.fit is None:
        lines.append(_line("polynomial-ergodicity", Verdict.NA, "TV curve below the numerical floor"))
    elif tv.regime == MixingRegime.GEOMETRIC:
        lines.append(
            _line(
                "polynomial-ergodicity",
                Verdict.NA,
                f"geometric regime (rate={tv.geometric_rate:.4f}); no polynomial exponent to check",
            )
        )
    else:
        diagnostics = config.diagnostics
        gap = abs(tv.fit.exponent - config.beta_nominal)
        ok = gap <= diagnostics.exponent_tolerance and tv.fit.r_squared >= diagnostics.min_r_squared
        lines.append(
            _line(
                "polynomial-ergodicity",
                _verdict(ok),
                f"exponent={tv.fit.exponent:.3f} nominal={config.beta_nominal:.3f} "
                f"tolerance={diagnostics.exponent_tolerance} r2={tv.fit.r_squared:.4f}",
            )
        )
    decreasing = bool(np.all(np.diff(blocks.values) <= 1e-12))
    lines.append(
        _line(
            "dependent-blocks",
            _verdict(decreasing and blocks.values[-1] < blocks.values[0]),
            f"worst-start TV {blocks.values[0]:.3g} -> {blocks.values[-1]:.3g}",
        )
    )
    payload = {
        "geometric_regime": tv.regime == MixingRegime.GEOMETRIC,
        "tv": tv.model_dump(mode="json"),
        "covariance": cov.model_dump(mode="json"),
        "blocks": blocks.model_dump(mode="json"),
        "diagnostics": lines,
    }
    io.write_json(out_dir / "mixing.json", payload)
    return payload


def stage_train(config: ExperimentConfig, out_dir: Path, threads: int) -> dict:
    kernel = io.load_kernel(out_dir / KERNEL)
    base = config.seeds.base_seed
    seeds = config.seeds.resolve()
    model0 = build_model(config, kernel, derive_seed(base, "init", 0))
    schedule = _schedule(config)
    io.save_model(out_dir / MODEL0, model0)

    if isinstance(model0, LinearModel):
        fixed_point = decomp.linear_fixed_point(kernel, model0.features, config.discount)
    else:
        reference = StepSchedule(c_alpha=config.diagnostics.reference_c_alpha, eta=schedule.eta)
        fixed_point = decomp.nonlinear_fixed_point(
            kernel,
            model0,
            reference,
            config.discount,
            config.diagnostics.reference_T,
            derive_seed(base, "reference", 0),
        )
    io.save_fixed_point(out_dir / FIXED_POINT, fixed_point)

    worker = partial(
        _train_one,
        kernel=kernel,
        model0=model0,
        schedule=schedule,
        discount=config.discount,
        T=config.T,
        checkpoint_every=config.checkpoint_every,
        start=config.start,
        record_stream=config.diagnostics.decompose,
    )
    histories = _parallel_map(worker, seeds, threads)
    final_errors = []
    for index, history in enumerate(histories):
        io.save_history(*history_paths(out_dir, index), history, fixed_point.theta_star)
        final_errors.append(float(np.linalg.norm(history.thetas[-1] - fixed_point.theta_star)))
    initial_error = float(np.linalg.norm(approx.parameters(model0) - fixed_point.theta_star))

    payload = {
        "n_histories": len(histories),
        "seeds": seeds,
        "fixed_point_method": fixed_point.method.value,
        "fixed_point_residual": fixed_point.residual,
        "initial_error": initial_error,
        "final_errors": final_errors,
        "diagnostics": [],
    }
    io.write_json(out_dir / "train.json", payload)
    return payload


def stage_decompose(config: ExperimentConfig, out_dir: Path, threads: int) -> dict:
    kernel = io.load_kernel(out_dir / KERNEL)
    fixed_point = io.load_fixed_point(out_dir / FIXED_POINT)
    histories = _load_histories(out_dir)
    theta_star = fixed_point.theta_star
    decompositions = _parallel_map(
        partial(decomp.decompose, kernel=kernel, theta_star=theta_star), histories, threads
    )
    for index, decomposition in enumerate(decompositions):
        io.save_decomposition(out_dir / "decompositions" / f"decomposition_{index:04d}.csv", decomposition)

    reconstruction = max(decomp.reconstruction_error(d) for d in decompositions)
    bins = decomp.martingale_bin_test(decompositions)
    payload: dict = {"reconstruction_error": reconstruction, "bin_test": bins.model_dump(mode="json")}
    orthogonal = True
    if len(decompositions) >= decomp.MIN_CURVE_SEEDS:
        variance = decomp.martingale_variance_curve(decompositions, seed=config.seeds.base_seed)
        orthogonality = decomp.increment_orthogonality(decompositions)
        orthogonal = orthogonality.passed
        payload["martingale_variance"] = variance.model_dump(mode="json")
        payload["orthogonality"] = orthogonality.model_dump(mode="json")
        io.save_series(
            out_dir / "martingale_variance.csv",
            t=variance.ts,
            mean_sq=variance.value,
            ci_low=variance.ci_low,
            ci_high=variance.ci_high,
        )

    model_star = approx.with_parameters(histories[0].model0, theta_star)
    jacobian = decomp.estimate_update_jacobian(kernel, model_star, config.discount)
    payload["jacobian"] = {
        "lambda_min": jacobian.lambda_min,
        "positive_definite": jacobian.positive_definite,
    }
    remainder = decomp.remainder_exponent_report(
        decompositions,
        config.diagnostics.holder_gamma,
        config.schedule.eta,
        window=(config.windows.burn_in, None),
    )
    payload["remainder"] = remainder.model_dump() if remainder else None

    payload["diagnostics"] = [
        _line(
            "error-decomposition",
            _verdict(reconstruction <= RECONSTRUCTION_TOL),
            f"max reconstruction error {reconstruction:.2e}",
        ),
        _line(
            "martingale-difference",
            _verdict(bins.passed and orthogonal),
            f"{bins.pass_fraction:.1%} of {bins.n_bins} bins within 4 SE",
        ),
    ]
    io.write_json(out_dir / "decompose.json", payload)
    return payload


def stage_couple(config: ExperimentConfig, out_dir: Path, threads: int) -> dict:
    kernel = io.load_kernel(out_dir / KERNEL)
    diagnostics = config.diagnostics
    if not diagnostics.coupling:
        payload = {"diagnostics": [_line("coupling", Verdict.NA, "disabled")]}
        io.write_json(out_dir / "couple.json", payload)
        return payload

    seeds = derive_seeds(config.seeds.base_seed, "coupling", diagnostics.coupling_seeds)
    window = config.windows.coupling
    x0, y0 = 0, kernel.n_states - 1
    report = depend.coupling_study(kernel, x0, y0, diagnostics.coupling_T, seeds, window=window)
    tv = depend.tv_mixing(kernel, x0, report.ts, window)
    io.save_series(
        out_dir / "couple.csv",
        t=report.ts,
        p_apart=report.p_apart,
        stderr=report.stderr,
        lower_bound=report.lower_bound,
        tv_gap=report.tv_gap,
    )
    plots.loglog_plot(
        out_dir / "couple.svg",
        report.ts,
        {"P(x_t != y_t)": report.p_apart, "coupling lower bound": report.lower_bound},
        title="Maximal coupling",
    )
    exponent_ok = True
    detail = f"dominates lower bound={report.dominates_lower_bound}"
    if report.fit is not None and tv.fit is not None:
        exponent_ok = report.fit.exponent >= tv.fit.exponent - 0.3
        detail += f" exponent={report.fit.exponent:.3f} tv exponent={tv.fit.exponent:.3f}"
    ok = report.dominates_lower_bound and report.envelope_domination and exponent_ok
    payload = {
        "report": report.model_dump(mode="json"),
        "diagnostics": [_line("coupling", _verdict(ok), detail)],
    }
    io.write_json(out_dir / "couple.json", payload)
    return payload


def _block_sets(
    kernel: TransitionKernel, config: ExperimentConfig, b: int, seeds: Sequence[int]
) -> List:
    length = b * config.diagnostics.n_blocks - 1
    paths = chain.sample_trajectories(kernel, config.start, length, seeds)
    sets = []
    for seed, states in zip(seeds, paths):
        trajectory = Trajectory(
            states=states, rewards=kernel.rewards[states[:-1]], seed=seed, kernel_id=kernel.kernel_id
        )
        sets.append(depend.make_blocks(trajectory, kernel.rewards, b))
    return sets


def _covariance_line(config: ExperimentConfig, kernel: TransitionKernel, payload: dict) -> dict:
    diagnostics = config.diagnostics
    if not diagnostics.blocks:
        return _line("covariance-between-blocks", Verdict.NA, "disabled")
    seeds = derive_seeds(config.seeds.base_seed, "blocks", diagnostics.block_seeds)
    try:
        blocksets = _block_sets(kernel, config, diagnostics.block_size, seeds)
        report = depend.block_covariance_check(blocksets, config.beta_nominal)
    except (InsufficientSeeds, TrajectoryTooShort) as e:
        return _line("covariance-between-blocks", Verdict.NA, str(e))
    payload["covariance"] = report.model_dump(mode="json")
    decays = report.fit is None or report.fit.exponent > 0
    return _line(
        "covariance-between-blocks",
        _verdict(report.domination and decays),
        f"C={report.c_blocks:.4g} slack={report.slack_min:.3g}",
    )


def _concentration_line(config: ExperimentConfig, kernel: TransitionKernel, payload: dict) -> dict:
    diagnostics = config.diagnostics
    if not diagnostics.concentration:
        return _line("concentration", Verdict.NA, "disabled")
    tables = []
    for offset, n in enumerate(diagnostics.concentration_n):
        seeds = [
            derive_seed(config.seeds.base_seed, "concentration", offset * diagnostics.concentration_seeds + i)
            for i in range(diagnostics.concentration_seeds)
        ]
        try:
            tables.append(
                depend.concentration_tail(
                    kernel, kernel.rewards, n, diagnostics.epsilons, seeds, config.beta_nominal
                )
            )
        except InsufficientSeeds as e:
            return _line("concentration", Verdict.NA, str(e))
    payload["concentration"] = [table.model_dump(mode="json") for table in tables]
    return _line(
        "concentration",
        _verdict(all(table.dominates for table in tables)),
        ", ".join(f"n={table.n} C={table.c_beta:.3g}" for table in tables),
    )


def stage_blocks(config: ExperimentConfig, out_dir: Path, threads: int) -> dict:
    kernel = io.load_kernel(out_dir / KERNEL)
    payload: dict = {}
    payload["diagnostics"] = [
        _covariance_line(config, kernel, payload),
        _concentration_line(config, kernel, payload),
    ]
    io.write_json(out_dir / "blocks.json", payload)
    return payload


def _gradient_bound_draws(
    kernel: TransitionKernel, model0: ReluNetwork, draws: int, base_seed: int
) -> Tuple[float, int, float]:
    """Largest gradient norm over random within-budget networks and states, violations, and G."""
    constants = approx.gradient_constants(model0, kernel.r_max)
    rng = generator(derive_seed(base_seed, "landmarks", 1))
    largest, violations = 0.0, 0
    for index in range(draws):
        net = approx.init_relu_network(
            kernel.n_states,
            hidden=model0.hidden_widths,
            budget=model0.budget,
            x_max=model0.x_max,
            embedding_kind=model0.embedding_kind,
            seed=derive_seed(base_seed, "init", index + 1),
            init_scale=float(rng.uniform(0.1, 2.0)),
        )
        norm = float(np.linalg.norm(approx.grad(net, int(rng.integers(kernel.n_states)))))
        largest = max(largest, norm)
        violations += norm > constants.G * (1 + 1e-12)
    return largest, violations, constants.G


def stage_crossings(config: ExperimentConfig, out_dir: Path, threads: int) -> dict:
    kernel = io.load_kernel(out_dir / KERNEL)
    model0 = io.load_model(out_dir / MODEL0)
    diagnostics = config.diagnostics
    if not isinstance(model0, ReluNetwork) or not diagnostics.crossings:
        reason = "linear model" if isinstance(model0, LinearModel) else "disabled"
        payload = {
            "diagnostics": [
                _line("uniform-gradient-bound", Verdict.NA, reason),
                _line("region-crossings", Verdict.NA, reason),
            ]
        }
        io.write_json(out_dir / "crossings.json", payload)
        return payload

    base = config.seeds.base_seed
    largest, violations, G = _gradient_bound_draws(kernel, model0, diagnostics.gradient_draws, base)
    if model0.budget >= 1.0:
        gradient_line = _line(
            "uniform-gradient-bound",
            _verdict(violations == 0),
            f"max ||grad||={largest:.4g} G={G:.4g} violations={violations} "
            f"draws={diagnostics.gradient_draws}",
        )
    else:
        gradient_line = _line("uniform-gradient-bound", Verdict.NA, "budget below 1")

    history = td.run_td(
        kernel,
        model0,
        _schedule(config),
        config.discount,
        diagnostics.crossing_T,
        config.seeds.resolve()[0],
        checkpoint_every=1,
        start=config.start,
        record_stream=False,
    )
    landmarks = relu_diag.make_landmarks(model0, seed=derive_seed(base, "landmarks", 0))
    record = relu_diag.track_crossings(history, landmarks)
    share = relu_diag.crossing_plateau(record)
    violation_rate = relu_diag.crossing_bound_violations(record)
    io.save_series(
        out_dir / "crossings.csv",
        t=record.t,
        kappa_hat=record.kappa_hat,
        displacement=record.displacement,
        alpha=record.alpha,
        gamma_min_proxy=record.gamma_min_proxy,
        cum_kappa=record.cum_kappa,
    )
    payload = {
        "total_crossings": int(record.cum_kappa[-1]),
        "last_decade_share": share,
        "bound_violation_rate": violation_rate,
        "max_gradient_norm": largest,
        "G": G,
        "diagnostics": [
            gradient_line,
            _line(
                "region-crossings",
                _verdict(share < PLATEAU_SHARE and violation_rate < VIOLATION_RATE),
                f"last-decade share={share:.3f} bound violations={violation_rate:.3%}",
            ),
        ],
    }
    io.write_json(out_dir / "crossings.json", payload)
    return payload


def _bound_spec(
    config: ExperimentConfig,
    variant: BoundVariant,
    kernel: TransitionKernel,
    model_star,
    initial_error: float,
) -> BoundSpec:
    extra = {}
    if variant == BoundVariant.GRONWALL:
        jacobian = decomp.estimate_update_jacobian(kernel, model_star, config.discount)
        extra = {
            "lambda_min": max(jacobian.lambda_min, 1e-12),
            "lipschitz": float(np.linalg.norm(jacobian.H, 2)),
            "initial_error": initial_error,
        }
    return BoundSpec(
        variant=variant,
        beta=config.beta_nominal,
        eta=config.schedule.eta,
        holder_gamma=config.diagnostics.holder_gamma,
        delta=config.diagnostics.delta,
        **extra,
    )


def rate_verdict(
    report: BoundReport, model_kind: str, diagnostics: DiagnosticsConfig
) -> Tuple[Verdict, Optional[str], str]:
    """Held-out domination plus the exponent gap; returns (verdict, chosen variant, detail).

    Linear models are held to the primary variant, ReLU models to the closest compared variant.
    """
    if model_kind == "relu" and report.variant_gaps:
        chosen = report.closest_variant
        gap = report.variant_gaps[chosen]
        tolerance = diagnostics.rate_tolerance_relu
    else:
        chosen = report.variant.value
        gap = None if report.exponent_gap is None else abs(report.exponent_gap)
        tolerance = diagnostics.rate_tolerance_linear
    detail = f"variant={chosen} slack={report.slack_min:.3g}"
    if not report.domination:
        return Verdict.FAIL, chosen, detail + " envelope exceeded on the held-out half"
    if gap is None:
        return Verdict.NA, chosen, detail + " quantile exponent not fitted"
    detail += f" exponent={report.quantile_exponent:.3f} gap={gap:.3f} tolerance={tolerance}"
    return _verdict(gap <= tolerance), chosen, detail


def stage_rates(config: ExperimentConfig, out_dir: Path, threads: int) -> dict:
    kernel = io.load_kernel(out_dir / KERNEL)
    fixed_point = io.load_fixed_point(out_dir / FIXED_POINT)
    histories = _load_histories(out_dir)
    theta_star = fixed_point.theta_star
    schedule = _schedule(config)
    ts, errors = td.error_matrix(histories, theta_star)
    model_star = approx.with_parameters(histories[0].model0, theta_star)
    initial_error = float(np.linalg.norm(approx.parameters(histories[0].model0) - theta_star))

    payload: dict = {}
    if len(histories) >= decomp.MIN_CURVE_SEEDS:
        moments = {p: decomp.moment_curve(histories, theta_star, p=p) for p in (2, 4)}
        io.save_series(out_dir / "moments.csv", t=ts, p2=moments[2].value, p4=moments[4].value)

    reports = []
    for variant in config.diagnostics.variants:
        spec = _bound_spec(config, variant, kernel, model_star, initial_error)
        try:
            reports.append(
                rates.verify_error_bound(
                    ts, errors, spec, schedule, window=(config.windows.burn_in, None)
                )
            )
        except (InsufficientSeeds, WindowTooSmall) as e:
            logger.info(f"Bound {variant.value} not verified: {e}")
            payload["skipped"] = str(e)
            break

    if not reports:
        payload["diagnostics"] = [_line("high-probability-bound", Verdict.NA, payload.get("skipped", ""))]
        io.write_json(out_dir / "rates.json", payload)
        return payload

    first = reports[0]
    spec = _bound_spec(config, first.variant, kernel, model_star, initial_error).model_copy(
        update={"c": first.fitted["C"], "c_prime": first.fitted["Cp"]}
    )
    usable = ts >= max(config.windows.burn_in, 1)
    quantile = rates.quantile_curve(ts, errors, config.diagnostics.delta)
    plots.loglog_plot(
        out_dir / "rates.svg",
        ts[usable],
        {f"{1 - config.diagnostics.delta:g}-quantile": quantile.quantile[usable]},
        envelope=rates.bound_curve(spec, schedule, ts[usable]),
        reference_slopes=[first.predicted_exponent],
        title="Error quantile and envelope",
    )
    io.save_series(
        out_dir / "rates.csv",
        t=ts,
        quantile=quantile.quantile,
        ci_low=quantile.ci_low,
        ci_high=quantile.ci_high,
    )
    verdict, chosen, detail = rate_verdict(first, config.model.kind, config.diagnostics)
    payload["chosen_variant"] = chosen
    payload["reports"] = [report.model_dump(mode="json") for report in reports]
    payload["diagnostics"] = [_line("high-probability-bound", verdict, detail)]
    io.write_json(out_dir / "rates.json", payload)
    return payload


STAGE_FUNCTIONS: Dict[str, Callable[[ExperimentConfig, Path, int], dict]] = {
    "simulate": stage_simulate,
    "train": stage_train,
    "decompose": stage_decompose,
    "mixing": stage_mixing,
    "couple": stage_couple,
    "blocks": stage_blocks,
    "crossings": stage_crossings,
    "rates": stage_rates,
}


def run_stage(name: str, config: ExperimentConfig, out_dir: Union[str, Path], threads: Optional[int] = None) -> dict:
    """Run one stage; failures are logged with the stage name and re-raised."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    threads = threads or default_threads()
    if name == "report":
        return build_report(out_dir).model_dump(mode="json")
    logger.info(f"Stage {name} -> {out_dir}")
    try:
        return STAGE_FUNCTIONS[name](config, out_dir, threads)
    except TdMixError as e:
        logger.error(f"Stage {name} failed: {e}")
        raise


def build_report(out_dir: Union[str, Path]) -> StudyReport:
    """Collect the diagnostics of every stage artifact present under out_dir."""
    out_dir = Path(out_dir)
    found = [out_dir / name for name in REPORT_INPUTS if (out_dir / name).is_file()]
    if not found:
        raise MissingArtifact(str(out_dir / REPORT_INPUTS[0]))
    lines = []
    for path in found:
        for entry in io.read_json(path).get("diagnostics", []):
            lines.append(DiagnosticLine.model_validate(entry))
    report = StudyReport(lines=lines)
    io.write_json(out_dir / "report.json", report.model_dump(mode="json"))
    text = "\n".join(f"{line.name}: {line.verdict.value} {line.detail}".rstrip() for line in lines)
    (out_dir / "report.txt").write_text(text + "\n")
    return report


def run_pipeline(
    config: ExperimentConfig,
    out_dir: Optional[Union[str, Path]] = None,
    threads: Optional[int] = None,
    stages: Optional[Iterable[str]] = None,
) -> StudyReport:
    """Execute the stages in order, then the report and the manifest."""
    out_dir = Path(out_dir or config.output_dir)
    selected = list(stages) if stages is not None else list(STAGES)
    for name in STAGES:
        if name in selected:
            if name == "decompose" and not config.diagnostics.decompose:
                continue
            run_stage(name, config, out_dir, threads)
    report = build_report(out_dir)
    io.write_manifest(out_dir, config_hash(config), __version__)
    failed = [line.name for line in report.lines if line.verdict == Verdict.FAIL]
    logger.info(f"Study finished: {len(report.lines)} diagnostics, {len(failed)} failed")
    return report
