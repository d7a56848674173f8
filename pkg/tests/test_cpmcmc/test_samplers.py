from __future__ import annotations

import dataclasses
import math
import unittest.mock
from collections import Counter
from typing import List, Tuple

import numpy as np
import pytest
import scipy.stats

from cpmcmc.auxiliary import AuxBlock, AuxLayout, CorrelationParam
from cpmcmc.errors import DegenerateEstimateError, ParameterError, TraceSinkError
from cpmcmc.estimators import Estimator, ISEstimator, LoglikEstimate
from cpmcmc.models import GaussianREModel, LinearGaussianSSM, StatisticalModel
from cpmcmc.samplers import (
    ChainState,
    ChainTrace,
    Kernel,
    KernelConfig,
    TraceRecord,
    TraceSink,
    cpm_step,
    default_step_cov,
    initial_exact_state,
    initial_state,
    metropolis_accept,
    run_chain,
    run_chains,
)
from cpmcmc.streams import RandomStreams


def _posterior(model: GaussianREModel, y: np.ndarray) -> KernelConfig:
    _, variance = model.posterior_moments(y)
    T = y.shape[0]
    return KernelConfig(default_step_cov(np.array([[T * variance]]), T))


def _assert_matches_posterior(
    trace: ChainTrace, model: GaussianREModel, y: np.ndarray
) -> None:
    mean, variance = model.posterior_moments(y)
    draws = trace.discard_burn_in(500).theta[:, 0]
    assert np.mean(draws) == pytest.approx(mean, abs=0.1)
    assert 0.6 * variance < np.var(draws) < 1.6 * variance


def test_kernel_config_validation() -> None:
    with pytest.raises(ParameterError):
        KernelConfig(np.eye(1), n_iters=0)
    with pytest.raises(ParameterError):
        KernelConfig(np.eye(1), proposal="langevin")
    with pytest.raises(ParameterError):
        KernelConfig(np.eye(1), proposal="ar")
    assert KernelConfig(2.0).step_cov.shape == (1, 1)


def test_default_step_cov() -> None:
    np.testing.assert_allclose(
        default_step_cov(np.diag([2.0, 4.0]), 100),
        2.38**2 / 2 * np.diag([2.0, 4.0]) / 100,
    )


def test_metropolis_accept_edge_cases(rng: np.random.Generator) -> None:
    assert metropolis_accept(0.0, rng)
    assert metropolis_accept(3.0, rng)
    assert not metropolis_accept(math.nan, rng)
    assert not metropolis_accept(-math.inf, rng)


def test_exact_mh_targets_the_conjugate_posterior(
    re_model: GaussianREModel, re_data: np.ndarray
) -> None:
    mean, _ = re_model.posterior_moments(re_data)
    streams = RandomStreams(1)
    trace = run_chain(
        initial_exact_state(re_model, re_data, np.array([mean])),
        Kernel.exact(re_model, re_data, _posterior(re_model, re_data), streams),
        10_000,
    )
    assert 0.2 < trace.acceptance_rate < 0.8
    _assert_matches_posterior(trace, re_model, re_data)


def test_cpm_targets_the_conjugate_posterior(
    re_model: GaussianREModel, re_data: np.ndarray
) -> None:
    mean, _ = re_model.posterior_moments(re_data)
    streams = RandomStreams(2)
    estimator = ISEstimator(10)
    config = dataclasses.replace(
        _posterior(re_model, re_data),
        correlation=CorrelationParam.direct(0.9),
        estimator=estimator,
    )
    trace = run_chain(
        initial_state(re_model, re_data, np.array([mean]), estimator, streams),
        Kernel.cpm(re_model, re_data, config, streams),
        10_000,
        param_names=re_model.param_names,
    )
    assert trace.acceptance_rate > 0.05
    _assert_matches_posterior(trace, re_model, re_data)
    assert list(trace.to_frame().columns) == [
        "iter",
        "theta",
        "acc",
        "logp_cur",
        "logp_prop",
    ]


def test_ar_proposal_targets_the_conjugate_posterior(
    re_model: GaussianREModel, re_data: np.ndarray
) -> None:
    mean, variance = re_model.posterior_moments(re_data)
    streams = RandomStreams(3)
    # reference law centered away from the posterior mean
    config = KernelConfig(
        np.array([[4.0 * variance]]),
        proposal="ar",
        ar_center=np.array([mean + 0.2]),
        ar_coefficient=0.5,
    )
    trace = run_chain(
        initial_exact_state(re_model, re_data, np.array([mean])),
        Kernel.exact(re_model, re_data, config, streams),
        10_000,
    )
    _assert_matches_posterior(trace, re_model, re_data)


def test_chains_are_reproducible(
    re_model: GaussianREModel, re_data: np.ndarray
) -> None:
    estimator = ISEstimator(5)
    config = dataclasses.replace(
        _posterior(re_model, re_data),
        correlation=CorrelationParam.direct(0.95),
        estimator=estimator,
    )

    def run() -> ChainTrace:
        streams = RandomStreams(4)
        return run_chain(
            initial_state(re_model, re_data, np.array([0.5]), estimator, streams),
            Kernel.cpm(re_model, re_data, config, streams),
            300,
        )

    first, second = run(), run()
    np.testing.assert_array_equal(first.theta, second.theta)
    np.testing.assert_array_equal(first.logp_prop, second.logp_prop)


def test_pm_ignores_the_configured_correlation(
    re_model: GaussianREModel, re_data: np.ndarray
) -> None:
    estimator = ISEstimator(5)
    base = dataclasses.replace(_posterior(re_model, re_data), estimator=estimator)

    def run(rho: float) -> np.ndarray:
        streams = RandomStreams(5)
        config = base.with_correlation(CorrelationParam.direct(rho))
        return run_chain(
            initial_state(re_model, re_data, np.array([0.5]), estimator, streams),
            Kernel.pm(re_model, re_data, config, streams),
            200,
        ).theta

    np.testing.assert_array_equal(run(0.0), run(0.99))


@dataclasses.dataclass(frozen=True)
class _DegenerateAbove(Estimator):
    """Importance sampling, except that every estimate above threshold is degenerate"""

    N: int
    threshold: float

    def layout(self, model: StatisticalModel, T: int) -> AuxLayout:
        return ISEstimator(self.N).layout(model, T)

    def loglik(
        self, model: StatisticalModel, theta: np.ndarray, y: np.ndarray, u: AuxBlock
    ) -> LoglikEstimate:
        if theta[0] > self.threshold:
            raise DegenerateEstimateError(1)
        return ISEstimator(self.N).loglik(model, theta, y, u)

    def with_particles(self, N: int) -> _DegenerateAbove:
        return dataclasses.replace(self, N=N)


def test_degenerate_proposals_are_rejected(
    re_model: GaussianREModel, re_data: np.ndarray
) -> None:
    mean, variance = re_model.posterior_moments(re_data)
    estimator = _DegenerateAbove(5, mean + 0.05)
    streams = RandomStreams(6)
    config = KernelConfig(
        np.array([[variance]]), CorrelationParam.direct(0.9), estimator
    )
    trace = run_chain(
        initial_state(re_model, re_data, np.array([mean]), estimator, streams),
        Kernel.cpm(re_model, re_data, config, streams),
        200,
    )
    assert np.any(trace.degenerate)
    assert not np.any(trace.accepted[trace.degenerate])
    assert np.all(trace.theta[:, 0] <= mean + 0.05)


def test_initial_state_needs_prior_support(ssm_model: LinearGaussianSSM) -> None:
    y = np.zeros((5, 2))
    with pytest.raises(ParameterError):
        initial_exact_state(ssm_model, y, np.array([1.5]))


def test_score_error_is_recorded_when_monitored(
    re_model: GaussianREModel, re_data: np.ndarray
) -> None:
    mean, _ = re_model.posterior_moments(re_data)
    estimator = ISEstimator(5)
    streams = RandomStreams(7)
    monitor = np.array([mean])
    config = dataclasses.replace(
        _posterior(re_model, re_data),
        correlation=CorrelationParam.direct(0.9),
        estimator=estimator,
        psi_monitor=monitor,
    )
    state = initial_state(re_model, re_data, monitor, estimator, streams, monitor)
    trace = run_chain(state, Kernel.cpm(re_model, re_data, config, streams), 150)
    assert trace.psi is not None
    assert trace.psi.shape == (150, 1)
    assert np.all(np.isfinite(trace.psi))


class _ListSink(TraceSink):
    def __init__(self) -> None:
        self.records: List[TraceRecord] = []
        self.closed = False

    def write(self, record: TraceRecord) -> None:
        self.records.append(record)

    def close(self) -> None:
        self.closed = True


class _FailingSink(TraceSink):
    def write(self, record: TraceRecord) -> None:
        if record.iteration == 3:
            raise TraceSinkError("nowhere", 3, OSError("disk full"))

    def close(self) -> None:
        pass


def test_sinks_see_every_record_and_are_closed(
    re_model: GaussianREModel, re_data: np.ndarray
) -> None:
    streams = RandomStreams(8)
    kernel = Kernel.exact(re_model, re_data, _posterior(re_model, re_data), streams)
    state = initial_exact_state(re_model, re_data, np.array([0.5]))

    sink = _ListSink()
    trace = run_chain(state, kernel, 20, [sink])
    assert sink.closed
    assert [r.iteration for r in sink.records] == list(range(20))
    assert len(trace) == 20

    sink = _ListSink()
    with pytest.raises(TraceSinkError):
        run_chain(state, kernel, 20, [sink, _FailingSink()])
    assert sink.closed
    assert len(sink.records) == 4


def test_run_chain_needs_iterations(
    re_model: GaussianREModel, re_data: np.ndarray
) -> None:
    state = initial_exact_state(re_model, re_data, np.array([0.5]))
    kernel = Kernel.exact(
        re_model, re_data, _posterior(re_model, re_data), RandomStreams(0)
    )
    with pytest.raises(ParameterError):
        run_chain(state, kernel, 0)


def test_discard_burn_in(re_model: GaussianREModel, re_data: np.ndarray) -> None:
    state = initial_exact_state(re_model, re_data, np.array([0.5]))
    kernel = Kernel.exact(
        re_model, re_data, _posterior(re_model, re_data), RandomStreams(0)
    )
    trace = run_chain(state, kernel, 30)
    assert len(trace.discard_burn_in(10)) == 20
    np.testing.assert_array_equal(trace.discard_burn_in(10).theta, trace.theta[10:])
    with pytest.raises(ParameterError):
        trace.discard_burn_in(30)


def test_independent_chains_use_their_own_streams(
    re_model: GaussianREModel, re_data: np.ndarray
) -> None:
    config = _posterior(re_model, re_data)
    state = initial_exact_state(re_model, re_data, np.array([0.5]))
    streams = RandomStreams(9)
    chains = [
        (state, Kernel.exact(re_model, re_data, config, streams.replicate(j)))
        for j in range(2)
    ]
    traces = run_chains(chains, 100)
    assert len(traces) == 2
    assert traces[0].param_names == ("theta",)
    assert not np.array_equal(traces[0].theta, traces[1].theta)


def manual_test_cpm_passes_a_kolmogorov_smirnov_test() -> None:
    """Thinned CPM draws against the exact conjugate posterior, at the 1% level"""
    model = GaussianREModel()
    y = model.simulate(200, RandomStreams(30).simulation())
    mean, variance = model.posterior_moments(y)
    estimator = ISEstimator(12)
    streams = RandomStreams(31)
    config = KernelConfig(
        default_step_cov(np.array([[200 * variance]]), 200),
        CorrelationParam.direct(0.95),
        estimator,
    )
    trace = run_chain(
        initial_state(model, y, np.array([mean]), estimator, streams),
        Kernel.cpm(model, y, config, streams),
        101_000,
    ).discard_burn_in(1000)
    thinned = trace.theta[::100, 0]
    result = scipy.stats.kstest(thinned, "norm", args=(mean, math.sqrt(variance)))
    print(f"KS statistic {result.statistic:.4f}, p-value {result.pvalue:.4f}")
    assert result.pvalue > 0.01


# a target on the points 0, 1, 2 and the spread of a two-outcome estimate at each
_POINT_MASS = np.array([0.2, 0.3, 0.5])
_SPREAD = np.array([0.5, 0.2, 0.8])


class _ThreePointModel(StatisticalModel):
    @property
    def param_names(self) -> Tuple[str, ...]:
        return ("point",)

    @property
    def obs_dim(self) -> int:
        return 1

    @property
    def true_theta(self) -> np.ndarray:
        return np.zeros(1)

    def simulate(self, T: int, rng: np.random.Generator) -> np.ndarray:
        return np.zeros((T, 1))

    def prior_logdensity(self, theta: np.ndarray) -> float:
        return math.log(_POINT_MASS[int(theta[0])])


@dataclasses.dataclass(frozen=True)
class _TwoOutcomeEstimator(Estimator):
    """1 + s or 1 - s with equal probability, so unbiased for a unit likelihood"""

    N: int = 1

    def layout(self, model: StatisticalModel, T: int) -> AuxLayout:
        return AuxLayout(1, 1, 1)

    def loglik(
        self, model: StatisticalModel, theta: np.ndarray, y: np.ndarray, u: AuxBlock
    ) -> LoglikEstimate:
        sign = 1.0 if u.values[0] > 0 else -1.0
        return LoglikEstimate(math.log(1.0 + sign * _SPREAD[int(theta[0])]))

    def with_particles(self, N: int) -> _TwoOutcomeEstimator:
        return self


def _other_point(
    theta: np.ndarray, config: KernelConfig, rng: np.random.Generator
) -> Tuple[np.ndarray, float]:
    others = [p for p in range(3) if p != int(theta[0])]
    return np.array([float(others[int(rng.integers(2))])]), 0.0


def test_cpm_balances_the_flux_between_states() -> None:
    model = _ThreePointModel()
    estimator = _TwoOutcomeEstimator()
    y = np.zeros((1, 1))
    config = KernelConfig(
        np.eye(1), CorrelationParam.direct(0.5), estimator, n_iters=100_000
    )
    streams = RandomStreams(40)
    state = initial_state(model, y, np.array([0.0]), estimator, streams)

    def extended(s: ChainState) -> Tuple[int, bool]:
        assert s.u is not None
        return int(s.theta[0]), bool(s.u.values[0] > 0)

    visits: Counter[Tuple[int, bool]] = Counter()
    flux: Counter[Tuple[Tuple[int, bool], Tuple[int, bool]]] = Counter()
    with unittest.mock.patch(
        "cpmcmc.samplers._propose_theta", side_effect=_other_point
    ):
        for i in range(config.n_iters):
            new_state, _, _ = cpm_step(state, model, y, config, streams, i)
            flux[extended(state), extended(new_state)] += 1
            state = new_state
            visits[extended(state)] += 1

    for (a, b), count in list(flux.items()):
        if a[0] != b[0]:
            reverse = flux[b, a]
            assert abs(count - reverse) <= 3.5 * math.sqrt(count + reverse)

    # the extended target is pi(theta) m(u) p_hat(theta, u)
    for point in range(3):
        for positive in (False, True):
            sign = 1.0 if positive else -1.0
            expected = _POINT_MASS[point] * 0.5 * (1.0 + sign * _SPREAD[point])
            observed = visits[point, positive] / config.n_iters
            assert observed == pytest.approx(expected, abs=0.015)


def test_acceptance_grows_with_the_correlation(
    re_model: GaussianREModel, re_data: np.ndarray
) -> None:
    mean, _ = re_model.posterior_moments(re_data)
    estimator = ISEstimator(5)
    base = dataclasses.replace(_posterior(re_model, re_data), estimator=estimator)

    def acceptance(rho: float) -> float:
        streams = RandomStreams(41)
        return run_chain(
            initial_state(re_model, re_data, np.array([mean]), estimator, streams),
            Kernel.cpm(
                re_model,
                re_data,
                base.with_correlation(CorrelationParam.direct(rho)),
                streams,
            ),
            3000,
        ).acceptance_rate

    rates = [acceptance(rho) for rho in (0.0, 0.9, 0.999)]
    assert rates[0] < rates[1] < rates[2]
