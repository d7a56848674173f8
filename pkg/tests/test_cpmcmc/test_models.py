import logging
import math
import os

import numpy as np
import pytest
import scipy.stats

from cpmcmc.errors import CapabilityError, DataError, ParameterError
from cpmcmc.models import (
    GaussianREModel,
    HestonEulerModel,
    HestonPrior,
    LinearGaussianSSM,
    ar_log_proposal_ratio,
    ar_propose,
    brute_force_loglik,
    check_observations,
    euler_log_variance_step,
    kalman_loglik,
    read_observations,
    rw_propose,
    ssm_transition_matrix,
    write_observations,
)
from cpmcmc.streams import RandomStreams


def test_random_effects_likelihood(
    re_model: GaussianREModel, re_data: np.ndarray
) -> None:
    assert re_data.shape == (50, 1)
    theta = np.array([0.3])
    expected = np.sum(scipy.stats.norm.logpdf(re_data[:, 0], 0.3, math.sqrt(2.0)))
    assert re_model.exact_loglik(theta, re_data) == pytest.approx(expected)


def test_random_effects_score_matches_finite_differences(
    re_model: GaussianREModel, re_data: np.ndarray
) -> None:
    theta = np.array([0.3])
    h = 1e-6
    numerical = (
        re_model.exact_loglik(theta + h, re_data)
        - re_model.exact_loglik(theta - h, re_data)
    ) / (2 * h)
    assert re_model.exact_score(theta, re_data)[0] == pytest.approx(numerical, abs=1e-5)


def test_random_effects_conjugate_posterior(re_model: GaussianREModel) -> None:
    y = np.array([[1.0], [2.0], [3.0]])
    mean, variance = re_model.posterior_moments(y)
    precision = 1.5 + 1e-4
    assert variance == pytest.approx(1 / precision)
    assert mean == pytest.approx(3.0 / precision)


def test_random_effects_rejects_bad_prior() -> None:
    with pytest.raises(ParameterError):
        GaussianREModel(prior_sd=0.0)


def test_transition_matrix() -> None:
    np.testing.assert_allclose(
        ssm_transition_matrix(0.4, 2), [[0.4, 0.16], [0.16, 0.4]]
    )


@pytest.mark.parametrize("k, T", [(1, 5), (2, 3), (2, 5), (3, 4)])
def test_kalman_matches_the_joint_density(k: int, T: int) -> None:
    model = LinearGaussianSSM(k=k, theta=0.4)
    y = model.simulate(T, RandomStreams(k * 10 + T).simulation())
    transition = ssm_transition_matrix(0.4, k)
    assert kalman_loglik(transition, y) == pytest.approx(
        brute_force_loglik(transition, y), abs=1e-9
    )


def test_ssm_simulation_and_prior(ssm_model: LinearGaussianSSM) -> None:
    states, y = ssm_model.simulate_states(30, np.random.default_rng(0))
    assert states.shape == (30, 2)
    assert y.shape == (30, 2)
    assert ssm_model.prior_logdensity(np.array([0.4])) == pytest.approx(-math.log(2))
    assert ssm_model.prior_logdensity(np.array([1.2])) == -math.inf


def test_unstable_transition_is_a_warning(caplog: pytest.LogCaptureFixture) -> None:
    with caplog.at_level(logging.WARNING):
        LinearGaussianSSM(k=3, theta=0.9)
    assert "spectral radius" in caplog.text


def test_observations_are_validated() -> None:
    assert check_observations([1.0, 2.0], 1).shape == (2, 1)
    with pytest.raises(DataError):
        check_observations([[1.0], [math.nan]], 1)
    with pytest.raises(DataError):
        check_observations(np.zeros((4, 3)), 2)


def test_observations_round_trip_exactly(out_dir: str) -> None:
    y = np.random.default_rng(3).standard_normal((17, 2)) * 1e3
    path = os.path.join(out_dir, "y.csv")
    write_observations(path, y)
    np.testing.assert_array_equal(read_observations(path), y)


def test_observations_need_the_expected_header(out_dir: str) -> None:
    path = os.path.join(out_dir, "bad.csv")
    with open(path, "w") as f:
        f.write("time,value\n1,0.5\n")
    with pytest.raises(DataError):
        read_observations(path)


def test_heston_parameters_are_checked() -> None:
    with pytest.raises(ParameterError):
        HestonEulerModel(omega=-0.1)
    with pytest.raises(ParameterError):
        HestonEulerModel(chi=1.0)
    with pytest.raises(ParameterError):
        HestonEulerModel(I=0)


def test_heston_layout_and_reporting() -> None:
    model = HestonEulerModel(I=5)
    assert model.aux_dim == 6
    assert model.eps == pytest.approx(0.2)
    reported = model.reported_parameters(model.true_theta)
    assert list(reported) == ["mu", "phi", "omega", "chi"]
    assert reported["phi"] == pytest.approx(math.exp(-model.upsilon))
    with pytest.raises(CapabilityError):
        model.exact_loglik(model.true_theta, np.zeros((3, 1)))


def test_heston_stationary_initial_variance() -> None:
    model = HestonEulerModel()
    theta = model.true_theta
    shape, rate = model.stationary_gamma(theta)
    u = np.array([-3.0, 0.0, 2.5])
    expected = np.log(
        scipy.stats.gamma.ppf(scipy.stats.norm.cdf(u), shape, scale=1 / rate)
    )
    np.testing.assert_allclose(model.stationary_log_variance(theta, u), expected)


def test_heston_simulation_is_finite() -> None:
    model = HestonEulerModel()
    states, y = model.simulate_states(100, np.random.default_rng(4))
    assert states.shape == (100, 1)
    assert np.all(np.isfinite(y))


def test_euler_step_by_hand() -> None:
    x = np.array([math.log(0.8)])
    stepped = euler_log_variance_step(x, np.array([0.5]), 1.0, 0.05, 0.2, 0.25)
    # drift 0.05 (1 / 0.8 - 1) - 0.5 0.2^2 / 0.8 = -0.0125 over a step of 0.25
    expected = math.log(0.8) - 0.003125 + 0.5 * 0.2 * math.sqrt(1.25) * 0.5
    assert stepped[0] == pytest.approx(expected, rel=1e-12)


def test_heston_interval_sums_from_the_left_endpoint() -> None:
    model = HestonEulerModel(mu=1.0, upsilon=0.05, omega=0.2, chi=-0.5, I=2)
    theta = model.true_theta
    x0 = np.array([math.log(0.8)])
    eta = np.array([[0.5, -1.2]])
    x, sigma2_hat, gamma_hat = model.interval(theta, x0, eta)

    eps = model.eps
    x1 = euler_log_variance_step(x0, eta[:, 0], 1.0, 0.05, 0.2, eps)
    x2 = euler_log_variance_step(x1, eta[:, 1], 1.0, 0.05, 0.2, eps)
    np.testing.assert_allclose(x, x2, rtol=1e-12)
    np.testing.assert_allclose(sigma2_hat, eps * (0.8 + np.exp(x1)), rtol=1e-12)
    np.testing.assert_allclose(
        gamma_hat,
        math.sqrt(eps) * (math.sqrt(0.8) * 0.5 - np.exp(0.5 * x1) * 1.2),
        rtol=1e-12,
    )


def test_heston_without_volatility_of_volatility() -> None:
    model = HestonEulerModel(
        mu=0.5, upsilon=0.05, omega=1e-6, chi=-0.3, I=4, delta_obs=1.0
    )
    states, y = model.simulate_states(20_000, np.random.default_rng(5))
    # the variance stays at mu and returns are N(0, mu delta_obs)
    np.testing.assert_allclose(states[:, 0], math.log(0.5), atol=1e-4)
    assert np.mean(y) == pytest.approx(0.0, abs=0.02)
    assert np.var(y) == pytest.approx(0.5, rel=0.05)


def test_random_effects_simulation_moments() -> None:
    y = GaussianREModel(theta=0.5).simulate(100_000, RandomStreams(6).simulation())
    assert y.shape == (100_000, 1)
    assert np.mean(y) == pytest.approx(0.5, abs=0.02)
    assert np.var(y) == pytest.approx(2.0, abs=0.05)
    assert np.corrcoef(y[1:, 0], y[:-1, 0])[0, 1] == pytest.approx(0.0, abs=0.02)


def test_random_walk_step_variance(rng: np.random.Generator) -> None:
    c, T = 2.0, 100
    theta = np.array([0.3])
    steps = np.array(
        [rw_propose(theta, np.array([[c * c / T]]), rng)[0] for _ in range(100_000)]
    )
    steps -= theta[0]
    variance = c * c / T
    assert np.mean(steps) == pytest.approx(0.0, abs=3 * math.sqrt(variance / 1e5))
    assert np.var(steps) == pytest.approx(
        variance, abs=3 * variance * math.sqrt(2 / 1e5)
    )


def test_heston_prior_support() -> None:
    prior = HestonPrior()
    assert prior.logdensity(np.array([1.0, 0.05, 0.2, 0.0])) > -math.inf
    assert prior.logdensity(np.array([1.0, 0.05, 0.2, 1.0])) == -math.inf
    assert prior.logdensity(np.array([-1.0, 0.05, 0.2, 0.0])) == -math.inf


def test_ar_proposal_ratio_is_the_reverse_move_ratio(rng: np.random.Generator) -> None:
    center = np.array([0.5, -1.0])
    cov = np.array([[1.0, 0.3], [0.3, 2.0]])
    a = 0.6
    theta = np.array([0.1, 0.2])
    theta_prop = ar_propose(theta, center, a, cov, rng)

    def log_q(start: np.ndarray, end: np.ndarray) -> float:
        return scipy.stats.multivariate_normal.logpdf(
            end, mean=center + a * (start - center), cov=(1 - a * a) * cov
        )

    assert ar_log_proposal_ratio(theta, theta_prop, center, cov) == pytest.approx(
        log_q(theta_prop, theta) - log_q(theta, theta_prop), rel=1e-9, abs=1e-12
    )
    with pytest.raises(ParameterError):
        ar_propose(theta, center, 1.0, cov, rng)
