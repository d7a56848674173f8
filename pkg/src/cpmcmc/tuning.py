"""
Choosing the number of particles and the correlation.

N grows as beta * T^alpha and rho = exp(-psi N / T). The procedure is: with a pilot N,
calibrate psi so that the stationary standard deviation of the log-likelihood ratio
at the posterior mode is about 1.4. Then, with psi fixed, measure the computing time
CT = N x IF over a grid of beta (on a subset of the data), fit
CT(beta) = C0 / beta + C1 beta and take beta_hat = sqrt(C0 / C1).
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.optimize

from cpmcmc.auxiliary import CorrelationParam
from cpmcmc.config import (
    DEFAULT_ALPHA,
    DEFAULT_BETA_GRID,
    DEFAULT_BURN_IN,
    DEFAULT_CALIBRATION_SAMPLES,
    DEFAULT_CT_ITERS,
    DEFAULT_KAPPA_TOL,
    DEFAULT_MEASURE_ITERS,
    DEFAULT_PILOT_PARTICLES,
    DEFAULT_SUBSET_FRACTION,
    DEFAULT_TARGET_KAPPA,
    MAX_CALIBRATION_STEPS,
    PSI_RANGE,
)
from cpmcmc.diagnostics import iact, loglik_ratio_samples, stationary_burn_in
from cpmcmc.errors import (
    CalibrationRangeError,
    DegenerateEstimateError,
    ParameterError,
    UndefinedIACTError,
)
from cpmcmc.estimators import Estimator, estimator_for
from cpmcmc.local_runner import local_map
from cpmcmc.models import StatisticalModel
from cpmcmc.samplers import (
    Kernel,
    KernelConfig,
    default_step_cov,
    initial_state,
    run_chain,
)
from cpmcmc.streams import RandomStreams

Rounding = Literal["ceil", "floor", "round"]
ROUNDINGS: Tuple[str, ...] = ("ceil", "floor", "round")

# beta * T^alpha values within this distance of an integer are treated as that integer
_ROUNDING_SLACK = 1e-9


@dataclasses.dataclass(frozen=True)
class ScalingPlan:
    """
    N = beta T^alpha rounded per `rounding`, delta = psi N / T and rho = exp(-delta).

    theta_hat and sigma_bar are the posterior mode and T times the posterior
    covariance, when known. They center the calibration and scale the random walk.
    """

    T: int
    beta: float
    psi: float
    alpha: float = DEFAULT_ALPHA
    rounding: str = "ceil"
    theta_hat: Optional[np.ndarray] = None
    sigma_bar: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ParameterError(f"T must be at least 1, got {self.T}")
        if not (self.beta > 0 and self.psi > 0 and self.alpha > 0):
            raise ParameterError(
                f"beta, psi and alpha must be positive, got {self.beta}, {self.psi}, "
                f"{self.alpha}"
            )
        if self.rounding not in ROUNDINGS:
            raise ParameterError(
                f"rounding must be one of {', '.join(ROUNDINGS)}, got {self.rounding}"
            )

    @classmethod
    def fixed_particles(
        cls, T: int, N: int, psi: float, alpha: float = DEFAULT_ALPHA
    ) -> ScalingPlan:
        """The plan whose N is exactly the given number of particles at this T"""
        return cls(T, N / T**alpha, psi, alpha, "round")

    @property
    def N(self) -> int:
        x = self.beta * self.T**self.alpha
        if self.rounding == "ceil":
            n = math.ceil(x - _ROUNDING_SLACK)
        elif self.rounding == "floor":
            n = math.floor(x + _ROUNDING_SLACK)
        else:
            n = round(x)
        return max(1, int(n))

    @property
    def delta(self) -> float:
        return self.psi * self.N / self.T

    @property
    def rho(self) -> float:
        return math.exp(-self.delta)

    @property
    def correlation(self) -> CorrelationParam:
        return CorrelationParam.from_scaling(self.psi, self.N, self.T)

    def with_psi(self, psi: float) -> ScalingPlan:
        return dataclasses.replace(self, psi=psi)

    def with_beta(self, beta: float) -> ScalingPlan:
        return dataclasses.replace(self, beta=beta)

    def with_posterior(self, mode: PosteriorMode) -> ScalingPlan:
        return dataclasses.replace(
            self, theta_hat=mode.theta_hat, sigma_bar=mode.sigma_bar
        )

    def require_posterior(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.theta_hat is None or self.sigma_bar is None:
            raise ParameterError(
                "The plan has no posterior mode, see find_posterior_mode"
            )
        return self.theta_hat, self.sigma_bar


@dataclasses.dataclass(frozen=True)
class PosteriorMode:
    theta_hat: np.ndarray
    # T times the posterior covariance
    sigma_bar: np.ndarray
    # "optimize" or "pilot"
    method: str


def _log_posterior(
    model: StatisticalModel, y: np.ndarray, theta: np.ndarray
) -> float:
    log_prior = model.prior_logdensity(theta)
    if not log_prior > -math.inf:
        return -math.inf
    return model.exact_loglik(theta, y) + log_prior


def numerical_hessian(
    f: Callable[[np.ndarray], float], x: np.ndarray, relative_step: float = 1e-4
) -> np.ndarray:
    """Central finite differences, each step relative to max(1, |x_i|)"""
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    h = relative_step * np.maximum(1.0, np.abs(x))
    hessian = np.empty((d, d))
    for i in range(d):
        for j in range(i, d):
            e_i = np.zeros(d)
            e_i[i] = h[i]
            e_j = np.zeros(d)
            e_j[j] = h[j]
            value = (
                f(x + e_i + e_j)
                - f(x + e_i - e_j)
                - f(x - e_i + e_j)
                + f(x - e_i - e_j)
            ) / (4.0 * h[i] * h[j])
            hessian[i, j] = hessian[j, i] = value
    return hessian


def find_posterior_mode(
    model: StatisticalModel, y: np.ndarray, theta0: Optional[np.ndarray] = None
) -> PosteriorMode:
    """
    Maximizes the exact log posterior and takes sigma_bar = T H^{-1} where H is the
    negative Hessian at the mode. Models without an exact likelihood should use
    pilot_posterior instead.
    """
    theta0 = model.true_theta if theta0 is None else np.asarray(theta0, dtype=float)
    result = scipy.optimize.minimize(
        lambda theta: -_log_posterior(model, y, theta),
        theta0,
        method="Nelder-Mead",
        options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 2000 * theta0.shape[0]},
    )
    if not result.success:
        logging.warning(f"Posterior mode search did not converge: {result.message}")
    theta_hat = np.atleast_1d(np.asarray(result.x, dtype=float))
    precision = -numerical_hessian(lambda t: _log_posterior(model, y, t), theta_hat)
    if not np.all(np.linalg.eigvalsh(precision) > 0):
        raise ParameterError(
            f"The log posterior is not concave at {theta_hat}, no curvature estimate"
        )
    sigma_bar = y.shape[0] * np.linalg.inv(precision)
    logging.info(
        f"Posterior mode {theta_hat}, sigma_bar diagonal {np.diag(sigma_bar)}"
    )
    return PosteriorMode(theta_hat, sigma_bar, "optimize")


def pilot_step_cov(theta0: np.ndarray, T: int) -> np.ndarray:
    """A random walk covariance guessed from the magnitude of theta0"""
    return np.diag(np.maximum(np.abs(theta0), 0.1) ** 2) / T


def pilot_posterior(
    model: StatisticalModel,
    y: np.ndarray,
    plan: ScalingPlan,
    theta0: np.ndarray,
    n_iters: int,
    streams: RandomStreams,
    estimator: Optional[Estimator] = None,
) -> PosteriorMode:
    """
    Two CPM pilot runs of n_iters each. The first uses pilot_step_cov, the second is
    started where the first ended and scaled by its covariance. Returns the mean and
    T times the covariance of the second half of the second run.
    """
    T = y.shape[0]
    estimator = estimator or estimator_for(model, plan.N)
    theta = np.asarray(theta0, dtype=float)
    step_cov = pilot_step_cov(theta, T)
    trace = None
    for round_ in range(2):
        round_streams = streams.replicate(round_)
        config = KernelConfig(step_cov, plan.correlation, estimator, n_iters)
        state = initial_state(model, y, theta, estimator, round_streams)
        trace = run_chain(
            state, Kernel.cpm(model, y, config, round_streams), n_iters
        ).discard_burn_in(n_iters // 2)
        if trace.acceptance_rate == 0:
            raise ParameterError(f"Pilot round {round_ + 1} never accepted a move")
        theta = trace.final_state.theta
        step_cov = default_step_cov(T * np.atleast_2d(np.cov(trace.theta.T)), T)
        logging.info(
            f"Pilot round {round_ + 1}: acceptance {trace.acceptance_rate:.3f}, "
            f"mean {np.mean(trace.theta, axis=0)}"
        )
    assert trace is not None
    return PosteriorMode(
        np.mean(trace.theta, axis=0),
        T * np.atleast_2d(np.cov(trace.theta.T)),
        "pilot",
    )


def subset_data(
    y: np.ndarray, fraction: float = DEFAULT_SUBSET_FRACTION
) -> np.ndarray:
    """The first ceil(fraction T) observations"""
    if not 0 < fraction <= 1:
        raise ParameterError(f"fraction must lie in (0, 1], got {fraction}")
    return y[: max(1, math.ceil(fraction * y.shape[0]))]


def stationary_kappa(
    model: StatisticalModel,
    y: np.ndarray,
    theta: np.ndarray,
    estimator: Estimator,
    correlation: CorrelationParam,
    n_samples: int,
    streams: RandomStreams,
) -> float:
    """
    Standard deviation of R from the U-only chain at theta. Burn-in is capped at
    n_samples, so correlations very close to 1 are measured from a chain that has
    not fully left N(0, I).
    """
    burn_in = min(stationary_burn_in(correlation), n_samples)
    samples = loglik_ratio_samples(
        model,
        y,
        theta,
        estimator,
        correlation,
        n_samples,
        "stationary",
        streams,
        burn_in,
    )
    r = samples.r
    if not np.all(np.isfinite(r)):
        return math.inf
    return float(np.std(r))


def calibrate_psi(
    model: StatisticalModel,
    y: np.ndarray,
    plan: ScalingPlan,
    streams: RandomStreams,
    target_kappa: float = DEFAULT_TARGET_KAPPA,
    tol: float = DEFAULT_KAPPA_TOL,
    n_samples: int = DEFAULT_CALIBRATION_SAMPLES,
    estimator: Optional[Estimator] = None,
    psi_range: Tuple[float, float] = PSI_RANGE,
) -> float:
    """
    Bisection on log psi until the stationary kappa at plan.theta_hat is within tol of
    target_kappa. Every evaluation reuses the same streams, so kappa is a smooth
    increasing function of psi across steps.
    """
    if y.shape[0] != plan.T:
        raise ParameterError(f"The plan is for T={plan.T}, got {y.shape[0]} rows")
    if not target_kappa > 0:
        raise ParameterError(f"target_kappa must be positive, got {target_kappa}")
    theta_hat, _ = plan.require_posterior()
    estimator = estimator or estimator_for(model, plan.N)

    def kappa_at(psi: float) -> float:
        return stationary_kappa(
            model,
            y,
            theta_hat,
            estimator,
            CorrelationParam.from_scaling(psi, plan.N, plan.T),
            n_samples,
            streams,
        )

    lo, hi = psi_range
    kappa_lo, kappa_hi = kappa_at(lo), kappa_at(hi)
    if not kappa_lo - tol <= target_kappa <= kappa_hi + tol:
        raise CalibrationRangeError(target_kappa, psi_range, (kappa_lo, kappa_hi))
    if abs(kappa_lo - target_kappa) < tol:
        return lo
    if abs(kappa_hi - target_kappa) < tol:
        return hi

    kappa = math.nan
    for step in range(MAX_CALIBRATION_STEPS):
        psi = math.sqrt(lo * hi)
        kappa = kappa_at(psi)
        logging.debug(f"Calibration step {step + 1}: psi={psi:.6g} kappa={kappa:.4f}")
        if abs(kappa - target_kappa) < tol:
            logging.info(
                f"Calibrated psi={psi:.6g} (rho={math.exp(-psi * plan.N / plan.T):.6f}"
                f", kappa={kappa:.4f}) for N={plan.N}, T={plan.T}"
            )
            return psi
        if kappa < target_kappa:
            lo = psi
        else:
            hi = psi
    raise CalibrationRangeError(target_kappa, (lo, hi), (kappa, kappa))


@dataclasses.dataclass(frozen=True)
class CTFit:
    c0: float
    c1: float
    beta_hat: float
    residual_norm: float

    def predict(self, beta: np.ndarray) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        return self.c0 / beta + self.c1 * beta


def fit_ct_curve(beta_grid: Sequence[float], ct: Sequence[float]) -> CTFit:
    """Least squares fit of CT(beta) = c0 / beta + c1 beta"""
    beta = np.asarray(beta_grid, dtype=float)
    values = np.asarray(ct, dtype=float)
    if beta.shape != values.shape or beta.shape[0] < 3:
        raise ParameterError(
            f"Need at least 3 matching grid points and measurements, got {beta.shape}"
            f" and {values.shape}"
        )
    if not (np.all(beta > 0) and np.all(values > 0)):
        raise ParameterError("beta values and CT measurements must be positive")

    design = np.column_stack([1.0 / beta, beta])
    coefficients, _, rank, _ = np.linalg.lstsq(design, values, rcond=None)
    if rank < 2:
        raise ParameterError(f"The design is singular for beta grid {beta.tolist()}")
    c0, c1 = (float(c) for c in coefficients)
    if c0 < 0 or c1 < 0:
        logging.warning(
            f"Clamping negative CT coefficients c0={c0:.4g}, c1={c1:.4g} to 0"
        )
        c0, c1 = max(c0, 0.0), max(c1, 0.0)
    if c1 == 0:
        beta_hat = math.inf
    else:
        beta_hat = math.sqrt(c0 / c1)
    residual_norm = float(np.linalg.norm(design @ np.array([c0, c1]) - values))
    return CTFit(c0, c1, beta_hat, residual_norm)


def first_parameter(theta_trace: np.ndarray) -> np.ndarray:
    return theta_trace[:, 0]


@dataclasses.dataclass(frozen=True)
class CTMeasurement:
    beta: float
    N: int
    rho: float
    kappa_sq: float
    if_h: float
    ct: float
    acc_rate: float

    def to_row(self) -> Dict[str, float]:
        return {
            "beta": self.beta,
            "N": float(self.N),
            "rho": self.rho,
            "kappa_sq": self.kappa_sq,
            "IF": self.if_h,
            "CT": self.ct,
            "acc_rate": self.acc_rate,
        }


def measure_ct_point(
    model: StatisticalModel,
    y: np.ndarray,
    plan: ScalingPlan,
    n_iters: int,
    streams: RandomStreams,
    h: Callable[[np.ndarray], np.ndarray] = first_parameter,
    burn_in: int = 0,
    measure_iters: int = DEFAULT_MEASURE_ITERS,
    estimator: Optional[Estimator] = None,
) -> CTMeasurement:
    """
    Runs the CPM chain from theta_hat with the default random walk and measures
    IF(h), plus kappa^2 from a U-only chain at theta_hat
    """
    theta_hat, sigma_bar = plan.require_posterior()
    estimator = estimator or estimator_for(model, plan.N)
    config = KernelConfig(
        default_step_cov(sigma_bar, plan.T), plan.correlation, estimator, n_iters
    )
    state = initial_state(model, y, theta_hat, estimator, streams)
    trace = run_chain(state, Kernel.cpm(model, y, config, streams), burn_in + n_iters)
    if burn_in:
        trace = trace.discard_burn_in(burn_in)
    if_h = iact(h(trace.theta))
    kappa = stationary_kappa(
        model,
        y,
        theta_hat,
        estimator,
        plan.correlation,
        measure_iters,
        streams.replicate(1),
    )
    return CTMeasurement(
        plan.beta,
        plan.N,
        plan.rho,
        kappa * kappa,
        if_h,
        plan.N * if_h,
        trace.acceptance_rate,
    )


def measure_ct(
    model: StatisticalModel,
    y: np.ndarray,
    plan: ScalingPlan,
    n_iters: int,
    streams: RandomStreams,
    h: Callable[[np.ndarray], np.ndarray] = first_parameter,
    burn_in: int = 0,
) -> float:
    """CT = N x IF(h) for the CPM chain of this plan"""
    return measure_ct_point(model, y, plan, n_iters, streams, h, burn_in).ct


def _tune_point(
    model: StatisticalModel,
    y: np.ndarray,
    plan: ScalingPlan,
    n_iters: int,
    streams: RandomStreams,
    burn_in: int,
    measure_iters: int,
    estimator: Optional[Estimator],
) -> Optional[CTMeasurement]:
    try:
        return measure_ct_point(
            model,
            y,
            plan,
            n_iters,
            streams,
            burn_in=burn_in,
            measure_iters=measure_iters,
            estimator=estimator.with_particles(plan.N) if estimator else None,
        )
    except (UndefinedIACTError, DegenerateEstimateError) as e:
        logging.warning(f"Grid point beta={plan.beta} (N={plan.N}) failed: {e}")
        return None


@dataclasses.dataclass(frozen=True)
class TuningResult:
    psi: float
    measurements: List[CTMeasurement]
    fit: CTFit

    def to_frame(self) -> pd.DataFrame:
        """beta, N, rho, kappa_sq, IF, CT per grid point, with the fit repeated"""
        df = pd.DataFrame([m.to_row() for m in self.measurements])
        df["psi"] = self.psi
        df["c0"] = self.fit.c0
        df["c1"] = self.fit.c1
        df["beta_hat"] = self.fit.beta_hat
        return df


def tune_beta(
    model: StatisticalModel,
    y: np.ndarray,
    mode: PosteriorMode,
    streams: RandomStreams,
    alpha: float = DEFAULT_ALPHA,
    beta_grid: Sequence[float] = DEFAULT_BETA_GRID,
    target_kappa: float = DEFAULT_TARGET_KAPPA,
    pilot_particles: int = DEFAULT_PILOT_PARTICLES,
    ct_iters: int = DEFAULT_CT_ITERS,
    burn_in: int = DEFAULT_BURN_IN,
    calibration_samples: int = DEFAULT_CALIBRATION_SAMPLES,
    measure_iters: int = DEFAULT_MEASURE_ITERS,
    subset_fraction: float = DEFAULT_SUBSET_FRACTION,
    jobs: int = 1,
    estimator: Optional[Estimator] = None,
) -> TuningResult:
    """
    On the first subset_fraction of y: calibrates psi at N = pilot_particles, then
    measures CT over beta_grid with that psi (one job per grid point) and fits the
    CT curve.

    estimator, when given, is resized to each N so that a fitted particle filter
    projection is shared by the calibration and every grid point.
    """
    y_subset = subset_data(y, subset_fraction)
    T = y_subset.shape[0]
    logging.info(f"Tuning on {T} of {y.shape[0]} observations")

    pilot_plan = ScalingPlan.fixed_particles(T, pilot_particles, 1.0, alpha)
    psi = calibrate_psi(
        model,
        y_subset,
        pilot_plan.with_posterior(mode),
        streams.replicate(0),
        target_kappa,
        n_samples=calibration_samples,
        estimator=estimator.with_particles(pilot_plan.N) if estimator else None,
    )

    plans = [
        ScalingPlan(T, beta, psi, alpha).with_posterior(mode) for beta in beta_grid
    ]
    results = local_map(
        _tune_point,
        [
            (
                model,
                y_subset,
                plan,
                ct_iters,
                streams.replicate(j + 1),
                burn_in,
                measure_iters,
                estimator,
            )
            for j, plan in enumerate(plans)
        ],
        jobs,
    )
    measurements = [m for m in results if m is not None]
    fit = fit_ct_curve([m.beta for m in measurements], [m.ct for m in measurements])
    logging.info(
        f"CT fit c0={fit.c0:.4g} c1={fit.c1:.4g}, beta_hat={fit.beta_hat:.4g}"
    )
    return TuningResult(psi, measurements, fit)
