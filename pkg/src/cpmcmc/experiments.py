"""
The pipelines behind each cpm subcommand. Every command is deterministic given its
config: all randomness comes from RandomStreams(config.seed), and parallel work items
carry their own disjoint stream families.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from cpmcmc.auxiliary import CorrelationParam
from cpmcmc.config import (
    CURVES_KEY,
    DATA_KEY,
    DEFAULT_PILOT_ITERS,
    OBSERVATION_FLOAT_FORMAT,
    RE_SCALING_T_VALUES,
    SSM_T_VALUES,
    SUMMARY_KEY,
    TABLE_IDS,
    TABLE_RE_SCALING,
    TABLE_SSM_K2,
    TRACE_KEY,
    TUNING_REPORT_KEY,
)
from cpmcmc.diagnostics import (
    DiagnosticsSummary,
    iact,
    measure_loglik_errors,
    summarize_chain,
)
from cpmcmc.errors import ConfigError
from cpmcmc.estimators import Estimator, PFEstimator, estimator_for
from cpmcmc.experiment_config import (
    ExperimentConfig,
    PlanConfig,
    build_model,
    config_rows,
)
from cpmcmc.local_runner import local_map
from cpmcmc.models import (
    StateSpaceModel,
    StatisticalModel,
    observations_frame,
    read_observations,
)
from cpmcmc.outputs import OutputStore, config_hash
from cpmcmc.samplers import (
    ChainState,
    ChainTrace,
    Kernel,
    KernelConfig,
    default_step_cov,
    initial_exact_state,
    initial_state,
    run_chain,
)
from cpmcmc.streams import RandomStreams
from cpmcmc.theory import rho_pm, rho_u, theory_curves
from cpmcmc.tuning import (
    PosteriorMode,
    ScalingPlan,
    find_posterior_mode,
    pilot_posterior,
    tune_beta,
)

# replicate indices of RandomStreams(seed), one per independent use
_PILOT_STREAMS = 1
_PROJECTION_STREAMS = 2
_MEASURE_STREAMS = 3
_TUNE_STREAMS = 4
_MH_STREAMS = 5


def _log_config(config: ExperimentConfig) -> None:
    logging.info(f"Config hash {config.hash()}")
    for path, value in config_rows(config):
        logging.debug(f"  {path} = {value}")


def load_observations(
    config: ExperimentConfig, model: StatisticalModel, streams: RandomStreams
) -> np.ndarray:
    """Reads data.path when set, otherwise simulates data.T observations"""
    if config.data.path is None:
        return model.simulate(config.data.T, streams.simulation())
    y = read_observations(config.data.path)
    if y.shape[1] != model.obs_dim:
        raise ConfigError(
            "data.path",
            f"{config.data.path} has {y.shape[1]} columns, the model needs "
            f"{model.obs_dim}",
        )
    logging.info(f"Read {y.shape[0]} observations from {config.data.path}")
    return y


def posterior_for(
    model: StatisticalModel, y: np.ndarray, plan: ScalingPlan, streams: RandomStreams
) -> PosteriorMode:
    """
    The exact posterior mode when the model has a likelihood, otherwise pilot CPM runs
    started at the model's configured parameter
    """
    if model.has_exact_loglik:
        return find_posterior_mode(model, y)
    return pilot_posterior(
        model,
        y,
        plan,
        model.true_theta,
        DEFAULT_PILOT_ITERS,
        streams.replicate(_PILOT_STREAMS),
        build_estimator(model, plan.N, model.true_theta, streams),
    )


def build_estimator(
    model: StatisticalModel, N: int, theta_hat: np.ndarray, streams: RandomStreams
) -> Estimator:
    """For state-space models the Hilbert projection is fitted at theta_hat"""
    estimator = estimator_for(model, N)
    if isinstance(estimator, PFEstimator) and isinstance(model, StateSpaceModel):
        estimator = estimator.with_pilot_projection(
            model, theta_hat, streams.replicate(_PROJECTION_STREAMS).initial()
        )
    return estimator


def _correlation(
    config: ExperimentConfig, plan: ScalingPlan, N: int
) -> CorrelationParam:
    if config.sampler.kind == "pm":
        return CorrelationParam.direct(0.0)
    if config.sampler.rho is not None:
        return CorrelationParam.direct(config.sampler.rho)
    return CorrelationParam.from_scaling(plan.psi, N, plan.T)


def _kernel_config(
    config: ExperimentConfig,
    T: int,
    mode: PosteriorMode,
    estimator: Optional[Estimator],
    correlation: CorrelationParam,
) -> KernelConfig:
    sampler = config.sampler
    if sampler.proposal == "ar":
        # the AR proposal is reversible for N(theta_hat, sigma_bar / T)
        return KernelConfig(
            sampler.step_scale * mode.sigma_bar / T,
            correlation,
            estimator,
            config.n_iters,
            config.burn_in,
            "ar",
            mode.theta_hat,
            sampler.ar_coefficient,
        )
    return KernelConfig(
        sampler.step_scale * default_step_cov(mode.sigma_bar, T),
        correlation,
        estimator,
        config.n_iters,
        config.burn_in,
    )


def cmd_simulate(config: ExperimentConfig) -> str:
    """Writes data.T simulated observations to data.csv, returns its path"""
    _log_config(config)
    model = build_model(config.model)
    y = model.simulate(config.data.T, RandomStreams(config.seed).simulation())
    path = OutputStore(config.out_dir).write_csv(
        DATA_KEY, observations_frame(y), config.hash(), OBSERVATION_FLOAT_FORMAT
    )
    logging.info(f"Wrote {y.shape[0]} observations to {path}")
    return path


@dataclasses.dataclass(frozen=True)
class RunResult:
    trace_path: str
    summary_path: str
    summary: DiagnosticsSummary
    report: pd.DataFrame


def _posterior_rows(model: StatisticalModel, trace: ChainTrace) -> pd.DataFrame:
    """Posterior mean and sd of each reported parameter"""
    reported = pd.DataFrame([model.reported_parameters(theta) for theta in trace.theta])
    rows = []
    for name in reported.columns:
        rows.append({"stat": f"mean_{name}", "value": reported[name].mean()})
        rows.append({"stat": f"sd_{name}", "value": reported[name].std()})
    df = pd.DataFrame(rows, columns=["stat", "value"])
    df["stderr"] = math.nan
    df["flag"] = 0
    return df


def cmd_run(config: ExperimentConfig) -> RunResult:
    """
    Runs the configured sampler from the posterior mode, streaming the trace to
    trace.ndjson, and writes summary.csv: IF and ESS per parameter, acceptance,
    posterior moments and, for pseudo-marginal samplers, kappa^2, sigma^2 and the
    moment checks of R and Z
    """
    _log_config(config)
    model = build_model(config.model)
    if config.sampler.kind == "mh" and not model.has_exact_loglik:
        raise ConfigError(
            "sampler.kind",
            f"mh needs an exact likelihood, {config.model.kind} has none",
        )
    streams = RandomStreams(config.seed)
    y = load_observations(config, model, streams)
    T = y.shape[0]
    plan = config.scaling_plan(T)
    mode = posterior_for(model, y, plan, streams)
    N = config.sampler.N or plan.N
    correlation = _correlation(config, plan, N)
    store = OutputStore(config.out_dir)

    estimator: Optional[Estimator] = None
    state: ChainState
    if config.sampler.kind == "mh":
        kernel_config = _kernel_config(config, T, mode, None, correlation)
        state = initial_exact_state(model, y, mode.theta_hat)
        kernel = Kernel.exact(model, y, kernel_config, streams)
    else:
        estimator = build_estimator(model, N, mode.theta_hat, streams)
        kernel_config = _kernel_config(config, T, mode, estimator, correlation)
        state = initial_state(model, y, mode.theta_hat, estimator, streams)
        if config.sampler.kind == "cpm":
            kernel = Kernel.cpm(model, y, kernel_config, streams)
        else:
            kernel = Kernel.pm(model, y, kernel_config, streams)

    logging.info(
        f"Running {config.sampler.kind} for {config.n_iters} iterations, T={T}, "
        f"N={N}, rho={correlation.rho:.6f}"
    )
    trace = run_chain(
        state,
        kernel,
        config.n_iters,
        [store.trace_sink(TRACE_KEY)],
        model.param_names,
    )

    kappa_sq = sigma_sq = None
    frames = []
    if estimator is not None:
        errors = measure_loglik_errors(
            model,
            y,
            mode.theta_hat,
            estimator,
            correlation,
            config.table.measure_iters,
            streams.replicate(_MEASURE_STREAMS),
        )
        kappa_sq, sigma_sq = errors.kappa_sq, errors.sigma_sq
        frames.append(errors.checks)

    summary = summarize_chain(trace, config.burn_in, kappa_sq, sigma_sq)
    posterior = _posterior_rows(model, trace.discard_burn_in(config.burn_in))
    report = pd.concat(
        [summary.to_frame(), posterior] + [f for f in frames if not f.empty],
        ignore_index=True,
    )
    summary_path = store.write_csv(SUMMARY_KEY, report, config.hash())
    logging.info(
        f"Acceptance {summary.acc_rate:.3f}, IF {summary.if_estimate}, summary "
        f"written to {summary_path}"
    )
    return RunResult(store.full_path(TRACE_KEY), summary_path, summary, report)


def cmd_tune(config: ExperimentConfig) -> str:
    """Calibrates psi, sweeps the beta grid and writes tuning_report.csv"""
    _log_config(config)
    model = build_model(config.model)
    streams = RandomStreams(config.seed)
    y = load_observations(config, model, streams)
    plan = config.scaling_plan(y.shape[0])
    mode = posterior_for(model, y, plan, streams)
    # the same projection as cmd_run, resized per grid point
    estimator = build_estimator(model, plan.N, mode.theta_hat, streams)
    result = tune_beta(
        model,
        y,
        mode,
        streams.replicate(_TUNE_STREAMS),
        alpha=config.plan.alpha,
        beta_grid=config.tune.beta_grid,
        target_kappa=config.tune.target_kappa,
        pilot_particles=config.tune.pilot_particles,
        ct_iters=config.tune.ct_iters,
        burn_in=config.burn_in,
        calibration_samples=config.tune.calibration_samples,
        measure_iters=config.table.measure_iters,
        subset_fraction=config.subset_fraction,
        jobs=config.jobs,
        estimator=estimator,
    )
    return OutputStore(config.out_dir).write_csv(
        TUNING_REPORT_KEY, result.to_frame(), config.hash()
    )


def cmd_curves(
    kappa_min: float = 0.2,
    kappa_max: float = 4.0,
    step: float = 0.01,
    out_dir: str = "out",
) -> str:
    """rho_u, RIF and ARCT over a kappa grid, for IF = 1 and the large IF limit"""
    df = theory_curves(kappa_min, kappa_max, step)
    hash_ = config_hash(
        {
            "command": "curves",
            "kappa_min": kappa_min,
            "kappa_max": kappa_max,
            "step": step,
        }
    )
    path = OutputStore(out_dir).write_csv(CURVES_KEY, df, hash_)
    logging.info(f"Wrote {len(df)} curve points to {path}")
    return path


def _table_model_check(config: ExperimentConfig, table_id: str) -> None:
    model = config.model
    if table_id == TABLE_RE_SCALING:
        if model.kind != "gaussian_re":
            raise ConfigError(
                "model.kind", f"{table_id} needs gaussian_re, got {model.kind}"
            )
    else:
        k = 2 if table_id == TABLE_SSM_K2 else 3
        if model.kind != "linear_gaussian_ssm" or model.k != k:
            raise ConfigError(
                "model", f"{table_id} needs linear_gaussian_ssm with k={k}"
            )


def _chain_if(trace: ChainTrace, burn_in: int) -> Tuple[float, float]:
    if burn_in:
        trace = trace.discard_burn_in(burn_in)
    return trace.acceptance_rate, iact(trace.theta[:, 0])


def table_row(
    model: StatisticalModel,
    T: int,
    plan_config: PlanConfig,
    streams: RandomStreams,
    measure_iters: int,
    if_iters: int,
    burn_in: int,
    with_if: bool,
) -> Dict[str, float]:
    """
    One row at data length T: simulated data, plan quantities, kappa^2 and sigma^2 at
    the posterior mode, and the acceptance rates they imply. with_if adds the
    acceptance and IF of exact MH and CPM chains and RIF = IF_CPM / IF_MH.
    """
    y = model.simulate(T, streams.simulation())
    mode = find_posterior_mode(model, y)
    plan = ScalingPlan(
        T,
        plan_config.beta,
        plan_config.psi,
        plan_config.alpha,
        plan_config.rounding,
    ).with_posterior(mode)
    estimator = build_estimator(model, plan.N, mode.theta_hat, streams)
    errors = measure_loglik_errors(
        model,
        y,
        mode.theta_hat,
        estimator,
        plan.correlation,
        measure_iters,
        streams.replicate(_MEASURE_STREAMS),
    )
    row = {
        "T": float(T),
        "N": float(plan.N),
        "delta": plan.delta,
        "rho": plan.rho,
        "kappa_sq": errors.kappa_sq,
        "sigma_sq": errors.sigma_sq,
        "rho_cpm": rho_u(math.sqrt(errors.kappa_sq)),
        "rho_pm": rho_pm(math.sqrt(errors.sigma_sq)),
    }

    if with_if:
        step_cov = default_step_cov(mode.sigma_bar, T)
        n_iters = burn_in + if_iters
        mh_streams = streams.replicate(_MH_STREAMS)
        mh = run_chain(
            initial_exact_state(model, y, mode.theta_hat),
            Kernel.exact(model, y, KernelConfig(step_cov), mh_streams),
            n_iters,
        )
        cpm_config = KernelConfig(step_cov, plan.correlation, estimator)
        cpm = run_chain(
            initial_state(model, y, mode.theta_hat, estimator, streams),
            Kernel.cpm(model, y, cpm_config, streams),
            n_iters,
        )
        acc_mh, if_mh = _chain_if(mh, burn_in)
        acc_cpm, if_cpm = _chain_if(cpm, burn_in)
        row.update(
            {
                "acc_mh": acc_mh,
                "IF_MH": if_mh,
                "acc_cpm": acc_cpm,
                "IF_CPM": if_cpm,
                "RIF": if_cpm / if_mh,
            }
        )

    logging.info(
        f"T={T}: N={plan.N}, rho={plan.rho:.4f}, kappa^2={errors.kappa_sq:.3f}, "
        f"sigma^2={errors.sigma_sq:.3f}"
    )
    return row


def cmd_table(config: ExperimentConfig, table_id: str) -> str:
    """
    Writes <table_id>.csv, one row per T. Each row simulates its own data from the
    seed, so rows are independent jobs.
    """
    if table_id not in TABLE_IDS:
        raise ConfigError(
            "table_id", f"must be one of {', '.join(TABLE_IDS)}, got {table_id}"
        )
    _table_model_check(config, table_id)
    _log_config(config)
    if config.data.path is not None:
        logging.warning("Tables simulate their own data, ignoring data.path")

    model = build_model(config.model)
    T_values: Tuple[int, ...] = config.table.T_values or (
        RE_SCALING_T_VALUES if table_id == TABLE_RE_SCALING else SSM_T_VALUES
    )
    streams = RandomStreams(config.seed)
    args: List[tuple] = [
        (
            model,
            T,
            config.plan,
            streams.replicate(T),
            config.table.measure_iters,
            config.table.if_iters,
            config.burn_in,
            table_id == TABLE_RE_SCALING,
        )
        for T in T_values
    ]
    rows = local_map(table_row, args, config.jobs)
    return OutputStore(config.out_dir).write_csv(
        f"{table_id}.csv", pd.DataFrame(rows), config.hash()
    )

