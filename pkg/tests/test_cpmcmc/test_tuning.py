import math
import unittest.mock
from typing import Any

import numpy as np
import pytest

from cpmcmc.errors import (
    CalibrationRangeError,
    ParameterError,
    UndefinedIACTError,
)
from cpmcmc.estimators import ISEstimator, PFEstimator
from cpmcmc.hilbert import LogisticProjection
from cpmcmc.models import GaussianREModel, LinearGaussianSSM, StatisticalModel
from cpmcmc.streams import RandomStreams
from cpmcmc.tuning import (
    CTMeasurement,
    PosteriorMode,
    ScalingPlan,
    calibrate_psi,
    find_posterior_mode,
    fit_ct_curve,
    measure_ct_point,
    numerical_hessian,
    pilot_posterior,
    stationary_kappa,
    subset_data,
    tune_beta,
)


@pytest.mark.parametrize(
    "T, alpha, beta, rounding, expected",
    [
        (1024, 0.5, 0.59, "ceil", 19),
        (2048, 0.5, 0.59, "ceil", 27),
        (4096, 0.5, 0.59, "ceil", 38),
        (8192, 0.5, 0.59, "ceil", 54),
        (100, 2 / 3, 0.854, "floor", 18),
        (400, 2 / 3, 0.854, "floor", 46),
        (100, 3 / 4, 1.57, "floor", 49),
        (100, 0.5, 2.0, "ceil", 20),
        (100, 0.5, 2.0, "floor", 20),
    ],
)
def test_particle_counts(
    T: int, alpha: float, beta: float, rounding: str, expected: int
) -> None:
    assert ScalingPlan(T, beta, 1.0, alpha, rounding).N == expected


def test_correlation_of_a_plan() -> None:
    plan = ScalingPlan(1024, 0.59, 0.574)
    assert plan.delta == pytest.approx(0.574 * 19 / 1024)
    assert plan.rho == pytest.approx(0.9894, abs=1e-4)
    assert plan.correlation.rho == pytest.approx(plan.rho)
    assert plan.with_psi(1.0).delta == pytest.approx(19 / 1024)
    assert plan.with_beta(1.18).N == 38


def test_fixed_particles() -> None:
    assert ScalingPlan.fixed_particles(7, 5, 1.0).N == 5
    assert ScalingPlan.fixed_particles(1000, 20, 1.0, alpha=0.75).N == 20


def test_plan_validation() -> None:
    with pytest.raises(ParameterError):
        ScalingPlan(0, 1.0, 1.0)
    with pytest.raises(ParameterError):
        ScalingPlan(10, -1.0, 1.0)
    with pytest.raises(ParameterError):
        ScalingPlan(10, 1.0, 0.0)
    with pytest.raises(ParameterError):
        ScalingPlan(10, 1.0, 1.0, rounding="up")
    with pytest.raises(ParameterError):
        ScalingPlan(10, 1.0, 1.0).require_posterior()


def test_numerical_hessian_of_a_quadratic() -> None:
    a = np.array([[3.0, 1.0], [1.0, 2.0]])
    hessian = numerical_hessian(lambda x: -0.5 * x @ a @ x, np.array([0.3, -2.0]))
    np.testing.assert_allclose(hessian, -a, atol=1e-5)


def test_posterior_mode_of_random_effects(
    re_model: GaussianREModel, re_data: np.ndarray
) -> None:
    mean, variance = re_model.posterior_moments(re_data)
    mode = find_posterior_mode(re_model, re_data)
    assert mode.method == "optimize"
    assert mode.theta_hat[0] == pytest.approx(mean, abs=1e-5)
    assert mode.sigma_bar[0, 0] == pytest.approx(50 * variance, rel=1e-3)


def test_posterior_mode_of_the_state_space_model(
    ssm_model: LinearGaussianSSM, ssm_data: np.ndarray
) -> None:
    mode = find_posterior_mode(ssm_model, ssm_data)
    assert -1 < mode.theta_hat[0] < 1
    assert mode.sigma_bar.shape == (1, 1)
    assert mode.sigma_bar[0, 0] > 0


def test_subset_data(re_data: np.ndarray) -> None:
    assert subset_data(re_data, 0.25).shape == (13, 1)
    np.testing.assert_array_equal(subset_data(re_data, 1.0), re_data)
    with pytest.raises(ParameterError):
        subset_data(re_data, 0.0)


def test_ct_curve_fit_recovers_the_optimum() -> None:
    beta = np.array([0.5, 1.0, 2.0, 4.0])
    fit = fit_ct_curve(beta, 2.0 / beta + 0.5 * beta)
    assert fit.c0 == pytest.approx(2.0)
    assert fit.c1 == pytest.approx(0.5)
    assert fit.beta_hat == pytest.approx(2.0)
    assert fit.residual_norm == pytest.approx(0.0, abs=1e-9)
    np.testing.assert_allclose(fit.predict(np.array([1.0])), [2.5])


def test_ct_curve_fit_with_noisy_measurements() -> None:
    rng = np.random.default_rng(12)
    beta = np.geomspace(0.5, 8.0, 8)
    exact = 2.0 / beta + 0.5 * beta
    close = 0
    for _ in range(100):
        noisy = exact * (1.0 + 0.05 * rng.standard_normal(beta.shape[0]))
        fit = fit_ct_curve(beta, noisy)
        if abs(fit.beta_hat - 2.0) <= 0.2:
            close += 1
    assert close >= 90


def test_ct_curve_without_a_linear_cost_has_no_optimum() -> None:
    beta = np.array([0.1, 0.2, 0.4, 0.8])
    fit = fit_ct_curve(beta, 1.0 / beta - 0.01 * beta)
    assert fit.c1 == 0.0
    assert fit.c0 == pytest.approx(1.0)
    assert fit.beta_hat == math.inf


def test_ct_curve_needs_enough_positive_points() -> None:
    with pytest.raises(ParameterError):
        fit_ct_curve([1.0, 2.0], [1.0, 2.0])
    with pytest.raises(ParameterError):
        fit_ct_curve([1.0, 2.0, 3.0], [1.0, 0.0, 2.0])
    with pytest.raises(ParameterError):
        fit_ct_curve([1.0, 2.0, 3.0], [1.0, 2.0])


def _plan(
    model: GaussianREModel, y: np.ndarray, N: int = 5, psi: float = 1.0
) -> ScalingPlan:
    mode = find_posterior_mode(model, y)
    return ScalingPlan.fixed_particles(y.shape[0], N, psi).with_posterior(mode)


def test_calibration_reaches_the_target(
    re_model: GaussianREModel, re_data: np.ndarray
) -> None:
    plan = _plan(re_model, re_data)
    streams = RandomStreams(60)
    psi = calibrate_psi(
        re_model, re_data, plan, streams, target_kappa=1.0, tol=0.25, n_samples=1000
    )
    assert 1e-4 <= psi <= 1e2
    kappa = stationary_kappa(
        re_model,
        re_data,
        plan.require_posterior()[0],
        ISEstimator(plan.N),
        plan.with_psi(psi).correlation,
        1000,
        streams,
    )
    assert abs(kappa - 1.0) < 0.25


def test_calibration_outside_the_range(
    re_model: GaussianREModel, re_data: np.ndarray
) -> None:
    plan = _plan(re_model, re_data)
    with pytest.raises(CalibrationRangeError):
        calibrate_psi(
            re_model,
            re_data,
            plan,
            RandomStreams(61),
            target_kappa=100.0,
            n_samples=200,
        )
    with pytest.raises(ParameterError):
        calibrate_psi(re_model, re_data[:10], plan, RandomStreams(61))
    with pytest.raises(ParameterError):
        calibrate_psi(
            re_model,
            re_data,
            ScalingPlan.fixed_particles(50, 5, 1.0),
            RandomStreams(61),
        )


def test_stationary_kappa_grows_with_psi(
    re_model: GaussianREModel, re_data: np.ndarray
) -> None:
    plan = _plan(re_model, re_data)
    theta_hat, _ = plan.require_posterior()

    def kappa(psi: float) -> float:
        return stationary_kappa(
            re_model,
            re_data,
            theta_hat,
            ISEstimator(plan.N),
            plan.with_psi(psi).correlation,
            500,
            RandomStreams(62),
        )

    assert kappa(1e-3) < kappa(10.0)


def test_ct_point(re_model: GaussianREModel, re_data: np.ndarray) -> None:
    plan = _plan(re_model, re_data, N=8)
    measurement = measure_ct_point(
        re_model, re_data, plan, 500, RandomStreams(63), burn_in=100, measure_iters=200
    )
    assert measurement.N == 8
    assert measurement.ct == pytest.approx(8 * measurement.if_h)
    assert measurement.rho == pytest.approx(math.exp(-8 / 50))
    assert 0 < measurement.acc_rate < 1
    assert list(measurement.to_row()) == [
        "beta",
        "N",
        "rho",
        "kappa_sq",
        "IF",
        "CT",
        "acc_rate",
    ]


def _fake_ct_point(
    model: StatisticalModel,
    y: np.ndarray,
    plan: ScalingPlan,
    n_iters: int,
    streams: RandomStreams,
    **kwargs: Any,
) -> CTMeasurement:
    if plan.beta == 0.3:
        raise UndefinedIACTError("stuck chain")
    ct = 2.0 / plan.beta + 0.5 * plan.beta
    return CTMeasurement(plan.beta, plan.N, plan.rho, 2.0, ct / plan.N, ct, 0.2)


def test_tune_beta_skips_failed_grid_points(
    re_model: GaussianREModel, re_data: np.ndarray
) -> None:
    mode = find_posterior_mode(re_model, re_data)
    with unittest.mock.patch(
        "cpmcmc.tuning.calibrate_psi", return_value=0.7
    ) as calibrate, unittest.mock.patch(
        "cpmcmc.tuning.measure_ct_point", side_effect=_fake_ct_point
    ):
        result = tune_beta(
            re_model,
            re_data,
            mode,
            RandomStreams(64),
            beta_grid=[0.3, 0.5, 1.0, 2.0, 4.0],
            subset_fraction=0.5,
        )
    # the pilot plan is calibrated on the first half of the data
    assert calibrate.call_args.args[1].shape == (25, 1)
    assert result.psi == 0.7
    assert [m.beta for m in result.measurements] == [0.5, 1.0, 2.0, 4.0]
    assert result.fit.beta_hat == pytest.approx(2.0)

    df = result.to_frame()
    assert df.shape[0] == 4
    assert set(["beta", "N", "CT", "psi", "c0", "c1", "beta_hat"]) <= set(df.columns)
    assert np.all(df["psi"] == 0.7)


def test_tune_beta_resizes_the_given_estimator(
    ssm_model: LinearGaussianSSM, ssm_data: np.ndarray
) -> None:
    mode = find_posterior_mode(ssm_model, ssm_data)
    projection = LogisticProjection(np.array([0.1, -0.2]), np.array([2.0, 3.0]))
    estimator = PFEstimator(30, projection)
    with unittest.mock.patch(
        "cpmcmc.tuning.calibrate_psi", return_value=0.7
    ) as calibrate, unittest.mock.patch(
        "cpmcmc.tuning.measure_ct_point", side_effect=_fake_ct_point
    ) as measure:
        tune_beta(
            ssm_model,
            ssm_data,
            mode,
            RandomStreams(68),
            beta_grid=[0.5, 1.0, 2.0, 4.0],
            pilot_particles=20,
            subset_fraction=0.5,
            estimator=estimator,
        )

    pilot_estimator = calibrate.call_args.kwargs["estimator"]
    assert pilot_estimator.N == 20
    assert pilot_estimator.projection is projection
    grid_estimators = [call.kwargs["estimator"] for call in measure.call_args_list]
    # N = ceil(beta sqrt(10)) on the 10 retained observations
    assert [e.N for e in grid_estimators] == [2, 4, 7, 13]
    assert all(e.projection is projection for e in grid_estimators)


def test_pilot_posterior(re_model: GaussianREModel, re_data: np.ndarray) -> None:
    mean, variance = re_model.posterior_moments(re_data)
    plan = ScalingPlan.fixed_particles(50, 10, 0.5)
    mode = pilot_posterior(
        re_model, re_data, plan, np.array([mean]), 2000, RandomStreams(65)
    )
    assert isinstance(mode, PosteriorMode)
    assert mode.method == "pilot"
    assert mode.theta_hat[0] == pytest.approx(mean, abs=0.15)
    assert 0.3 * 50 * variance < mode.sigma_bar[0, 0] < 3 * 50 * variance


def manual_test_tune_beta_for_random_effects() -> None:
    model = GaussianREModel()
    y = model.simulate(2048, RandomStreams(66).simulation())
    mode = find_posterior_mode(model, y)
    result = tune_beta(model, y, mode, RandomStreams(67), ct_iters=20_000, jobs=4)
    print(result.to_frame())
    assert 0.1 < result.fit.beta_hat < 5
