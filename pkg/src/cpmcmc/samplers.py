"""
Markov kernels over a common chain state: exact Metropolis-Hastings, pseudo-marginal
(PM) and correlated pseudo-marginal (CPM).

The CPM state is (theta, U) with cached log-estimate and log-prior. A step proposes
theta' from the parameter proposal and U' from the Crank-Nicolson kernel, and accepts
with probability min{1, p_hat(y|theta',U') p(theta') / p_hat(y|theta,U) p(theta)},
times the proposal ratio for non-symmetric proposals. PM is the special case where U'
is drawn afresh.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from abc import ABC, abstractmethod
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from cpmcmc.auxiliary import AuxBlock, CorrelationParam, cn_step, sample_fresh
from cpmcmc.config import DEFAULT_PROGRESS_EVERY, RANDOM_WALK_SCALE
from cpmcmc.errors import (
    DegenerateEstimateError,
    ParameterError,
    TraceSinkError,
)
from cpmcmc.estimators import Estimator
from cpmcmc.local_runner import local_map
from cpmcmc.models import (
    StatisticalModel,
    ar_log_proposal_ratio,
    ar_propose,
    rw_propose,
)
from cpmcmc.streams import RandomStreams


@dataclasses.dataclass(frozen=True)
class ChainState:
    theta: np.ndarray
    # absent for exact MH
    u: Optional[AuxBlock]
    # log p_hat(y | theta, u), or the exact log likelihood for exact MH
    log_est: float
    log_prior: float
    # score error at the monitored parameter for this u, when monitored
    psi: Optional[np.ndarray] = None

    @property
    def log_target(self) -> float:
        return self.log_est + self.log_prior


@dataclasses.dataclass(frozen=True)
class KernelConfig:
    # covariance of the random walk step, or the stationary covariance of the AR
    # proposal
    step_cov: np.ndarray
    correlation: CorrelationParam = CorrelationParam(0.0)
    # None for exact MH
    estimator: Optional[Estimator] = None
    n_iters: int = 1
    burn_in: int = 0
    # "rw" or "ar"
    proposal: str = "rw"
    ar_center: Optional[np.ndarray] = None
    ar_coefficient: float = 0.0
    # if set, Psi(psi_monitor, U) is recorded at every iteration
    psi_monitor: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        step_cov = np.atleast_2d(np.asarray(self.step_cov, dtype=float))
        object.__setattr__(self, "step_cov", step_cov)
        if self.n_iters < 1:
            raise ParameterError(f"n_iters must be at least 1, got {self.n_iters}")
        if self.burn_in < 0:
            raise ParameterError(f"burn_in must be non-negative, got {self.burn_in}")
        if self.proposal not in ("rw", "ar"):
            raise ParameterError(f"proposal must be rw or ar, got {self.proposal}")
        if self.proposal == "ar" and self.ar_center is None:
            raise ParameterError("The AR proposal needs ar_center")

    def with_correlation(self, correlation: CorrelationParam) -> KernelConfig:
        return dataclasses.replace(self, correlation=correlation)


def default_step_cov(sigma_bar: np.ndarray, T: int) -> np.ndarray:
    """(2.38^2 / d) Sigma_bar / T"""
    sigma_bar = np.atleast_2d(np.asarray(sigma_bar, dtype=float))
    return RANDOM_WALK_SCALE**2 / sigma_bar.shape[0] * sigma_bar / T


@dataclasses.dataclass(frozen=True)
class TraceRecord:
    iteration: int
    # the parameter after the step
    theta: np.ndarray
    accepted: bool
    # log p_hat at the state the step started from, and at the proposal
    logp_cur: float
    logp_prop: float
    # the proposed estimate was degenerate and therefore rejected
    degenerate: bool = False
    psi: Optional[np.ndarray] = None


class TraceSink(ABC):
    """Receives one record per iteration"""

    @abstractmethod
    def write(self, record: TraceRecord) -> None:
        ...

    @abstractmethod
    def close(self) -> None:
        ...


def _propose_theta(
    theta: np.ndarray, config: KernelConfig, rng: np.random.Generator
) -> Tuple[np.ndarray, float]:
    """Returns theta' and log q(theta', theta) - log q(theta, theta')"""
    if config.proposal == "rw":
        return rw_propose(theta, config.step_cov, rng), 0.0

    assert config.ar_center is not None
    theta_prop = ar_propose(
        theta, config.ar_center, config.ar_coefficient, config.step_cov, rng
    )
    return theta_prop, ar_log_proposal_ratio(
        theta, theta_prop, config.ar_center, config.step_cov
    )


def metropolis_accept(log_ratio: float, rng: np.random.Generator) -> bool:
    if math.isnan(log_ratio):
        return False
    if log_ratio >= 0.0:
        return True
    return math.log(rng.uniform()) < log_ratio


def _score_error(
    model: StatisticalModel,
    estimator: Estimator,
    monitor: np.ndarray,
    y: np.ndarray,
    u: AuxBlock,
) -> np.ndarray:
    return estimator.score(model, monitor, y, u) - model.exact_score(monitor, y)


def _pseudo_marginal_step(
    state: ChainState,
    model: StatisticalModel,
    y: np.ndarray,
    config: KernelConfig,
    streams: RandomStreams,
    iteration: int,
    propose_u: Callable[[AuxBlock, np.random.Generator], AuxBlock],
) -> Tuple[ChainState, bool, TraceRecord]:
    estimator = config.estimator
    if estimator is None or state.u is None:
        raise ParameterError("Pseudo-marginal steps need an estimator and a U block")

    theta_prop, log_q_ratio = _propose_theta(
        state.theta, config, streams.proposal(iteration)
    )
    u_prop = propose_u(state.u, streams.auxiliary(iteration))
    log_prior_prop = model.prior_logdensity(theta_prop)

    log_est_prop = -math.inf
    degenerate = False
    if log_prior_prop > -math.inf:
        try:
            log_est_prop = estimator.loglik(model, theta_prop, y, u_prop).value
        except DegenerateEstimateError as e:
            degenerate = True
            logging.warning(
                f"Degenerate likelihood estimate at iteration {iteration} "
                f"(observation t={e.t}), rejecting the proposal"
            )

    log_ratio = (log_est_prop + log_prior_prop) - state.log_target + log_q_ratio
    accepted = not degenerate and metropolis_accept(
        log_ratio, streams.accept(iteration)
    )
    if accepted:
        psi = None
        if config.psi_monitor is not None:
            psi = _score_error(model, estimator, config.psi_monitor, y, u_prop)
        new_state = ChainState(theta_prop, u_prop, log_est_prop, log_prior_prop, psi)
    else:
        new_state = state

    record = TraceRecord(
        iteration,
        new_state.theta,
        accepted,
        state.log_est,
        log_est_prop,
        degenerate,
        new_state.psi,
    )
    return new_state, accepted, record


def cpm_step(
    state: ChainState,
    model: StatisticalModel,
    y: np.ndarray,
    config: KernelConfig,
    streams: RandomStreams,
    iteration: int,
) -> Tuple[ChainState, bool, TraceRecord]:
    """One step of the correlated pseudo-marginal kernel"""
    return _pseudo_marginal_step(
        state,
        model,
        y,
        config,
        streams,
        iteration,
        lambda u, rng: cn_step(u, config.correlation, rng),
    )


def pm_step(
    state: ChainState,
    model: StatisticalModel,
    y: np.ndarray,
    config: KernelConfig,
    streams: RandomStreams,
    iteration: int,
) -> Tuple[ChainState, bool, TraceRecord]:
    """One step of the pseudo-marginal kernel, U' drawn afresh from N(0, I)"""
    return _pseudo_marginal_step(
        state,
        model,
        y,
        config.with_correlation(CorrelationParam(0.0)),
        streams,
        iteration,
        lambda u, rng: sample_fresh(u.layout, rng),
    )


def mh_exact_step(
    state: ChainState,
    model: StatisticalModel,
    y: np.ndarray,
    config: KernelConfig,
    streams: RandomStreams,
    iteration: int,
) -> Tuple[ChainState, bool, TraceRecord]:
    """One Metropolis-Hastings step using the exact likelihood"""
    theta_prop, log_q_ratio = _propose_theta(
        state.theta, config, streams.proposal(iteration)
    )
    log_prior_prop = model.prior_logdensity(theta_prop)
    log_lik_prop = -math.inf
    if log_prior_prop > -math.inf:
        log_lik_prop = model.exact_loglik(theta_prop, y)

    log_ratio = (log_lik_prop + log_prior_prop) - state.log_target + log_q_ratio
    accepted = metropolis_accept(log_ratio, streams.accept(iteration))
    new_state = (
        ChainState(theta_prop, None, log_lik_prop, log_prior_prop)
        if accepted
        else state
    )
    record = TraceRecord(
        iteration, new_state.theta, accepted, state.log_est, log_lik_prop
    )
    return new_state, accepted, record


def initial_state(
    model: StatisticalModel,
    y: np.ndarray,
    theta: np.ndarray,
    estimator: Estimator,
    streams: RandomStreams,
    psi_monitor: Optional[np.ndarray] = None,
) -> ChainState:
    """
    A pseudo-marginal starting state with U drawn from the stream reserved for
    initialization. A degenerate initial estimate raises.
    """
    theta = np.asarray(theta, dtype=float)
    log_prior = model.prior_logdensity(theta)
    if not log_prior > -math.inf:
        raise ParameterError(f"The initial parameter {theta} has zero prior density")
    u = sample_fresh(estimator.layout(model, y.shape[0]), streams.initial())
    psi = None
    if psi_monitor is not None:
        psi = _score_error(model, estimator, psi_monitor, y, u)
    log_est = estimator.loglik(model, theta, y, u).value
    return ChainState(theta, u, log_est, log_prior, psi)


def initial_exact_state(
    model: StatisticalModel, y: np.ndarray, theta: np.ndarray
) -> ChainState:
    theta = np.asarray(theta, dtype=float)
    log_prior = model.prior_logdensity(theta)
    if not log_prior > -math.inf:
        raise ParameterError(f"The initial parameter {theta} has zero prior density")
    return ChainState(theta, None, model.exact_loglik(theta, y), log_prior)


Step = Callable[
    [ChainState, StatisticalModel, np.ndarray, KernelConfig, RandomStreams, int],
    Tuple[ChainState, bool, TraceRecord],
]


@dataclasses.dataclass(frozen=True)
class Kernel:
    """A step function bound to its model, data, configuration and streams"""

    step: Step
    model: StatisticalModel
    y: np.ndarray
    config: KernelConfig
    streams: RandomStreams

    def __call__(
        self, state: ChainState, iteration: int
    ) -> Tuple[ChainState, TraceRecord]:
        new_state, _, record = self.step(
            state, self.model, self.y, self.config, self.streams, iteration
        )
        return new_state, record

    @classmethod
    def cpm(
        cls,
        model: StatisticalModel,
        y: np.ndarray,
        config: KernelConfig,
        streams: RandomStreams,
    ) -> Kernel:
        return cls(cpm_step, model, y, config, streams)

    @classmethod
    def pm(
        cls,
        model: StatisticalModel,
        y: np.ndarray,
        config: KernelConfig,
        streams: RandomStreams,
    ) -> Kernel:
        return cls(pm_step, model, y, config, streams)

    @classmethod
    def exact(
        cls,
        model: StatisticalModel,
        y: np.ndarray,
        config: KernelConfig,
        streams: RandomStreams,
    ) -> Kernel:
        return cls(mh_exact_step, model, y, config, streams)


@dataclasses.dataclass(frozen=True)
class ChainTrace:
    # (n, d)
    theta: np.ndarray
    accepted: np.ndarray
    logp_cur: np.ndarray
    logp_prop: np.ndarray
    degenerate: np.ndarray
    # (n, d) when the score error was monitored
    psi: Optional[np.ndarray]
    final_state: ChainState
    param_names: Tuple[str, ...]

    def __len__(self) -> int:
        return self.theta.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted))

    def discard_burn_in(self, n: int) -> ChainTrace:
        if not 0 <= n < len(self):
            raise ParameterError(f"Cannot discard {n} of {len(self)} iterations")
        return dataclasses.replace(
            self,
            theta=self.theta[n:],
            accepted=self.accepted[n:],
            logp_cur=self.logp_cur[n:],
            logp_prop=self.logp_prop[n:],
            degenerate=self.degenerate[n:],
            psi=None if self.psi is None else self.psi[n:],
        )

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.theta, columns=list(self.param_names))
        df.insert(0, "iter", np.arange(len(self)))
        df["acc"] = self.accepted.astype(int)
        df["logp_cur"] = self.logp_cur
        df["logp_prop"] = self.logp_prop
        return df


def run_chain(
    initial: ChainState,
    kernel: Callable[[ChainState, int], Tuple[ChainState, TraceRecord]],
    n_iters: int,
    sinks: Sequence[TraceSink] = (),
    param_names: Optional[Tuple[str, ...]] = None,
) -> ChainTrace:
    """
    Applies kernel n_iters times from initial, streaming every record to sinks. A sink
    failure closes the remaining sinks and propagates as TraceSinkError.
    """
    if n_iters < 1:
        raise ParameterError(f"n_iters must be at least 1, got {n_iters}")

    d = initial.theta.shape[0]
    theta = np.empty((n_iters, d))
    accepted = np.zeros(n_iters, dtype=bool)
    logp_cur = np.empty(n_iters)
    logp_prop = np.empty(n_iters)
    degenerate = np.zeros(n_iters, dtype=bool)
    psi: Optional[np.ndarray] = None
    if initial.psi is not None:
        psi = np.empty((n_iters, initial.psi.shape[0]))

    state = initial
    try:
        for n in range(n_iters):
            state, record = kernel(state, n)
            theta[n] = record.theta
            accepted[n] = record.accepted
            logp_cur[n] = record.logp_cur
            logp_prop[n] = record.logp_prop
            degenerate[n] = record.degenerate
            if psi is not None and record.psi is not None:
                psi[n] = record.psi
            for sink in sinks:
                sink.write(record)
            if (n + 1) % DEFAULT_PROGRESS_EVERY == 0:
                logging.debug(
                    f"Iteration {n + 1}/{n_iters}, acceptance so far "
                    f"{np.mean(accepted[: n + 1]):.3f}"
                )
    finally:
        for sink in sinks:
            try:
                sink.close()
            except TraceSinkError:
                logging.exception("Closing a trace sink failed")

    return ChainTrace(
        theta,
        accepted,
        logp_cur,
        logp_prop,
        degenerate,
        psi,
        state,
        param_names or tuple(f"theta{j + 1}" for j in range(d)),
    )


def _run_chain_job(
    initial: ChainState, kernel: Kernel, n_iters: int
) -> ChainTrace:
    return run_chain(initial, kernel, n_iters, param_names=kernel.model.param_names)


def run_chains(
    chains: Sequence[Tuple[ChainState, Kernel]], n_iters: int, jobs: int = 1
) -> List[ChainTrace]:
    """
    Runs independent chains, in parallel when jobs > 1. Each kernel should carry its
    own stream family, e.g. streams.replicate(chain_index).
    """
    return local_map(
        _run_chain_job, [(initial, kernel, n_iters) for initial, kernel in chains], jobs
    )
