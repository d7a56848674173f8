"""
Statistical models: Gaussian random effects, linear Gaussian state-space and the
Euler-discretized Heston stochastic volatility model.

A model is an immutable bundle of a data simulator, a prior, an exact
log-likelihood oracle where one exists, and the weight functions an estimator needs.
Parameters passed to the likelihood methods are always 1-d arrays of length dim;
observations are always (T, obs_dim) arrays.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from abc import ABC, abstractmethod
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
import scipy.stats

from cpmcmc.auxiliary import std_normal_cdf
from cpmcmc.config import (
    DEFAULT_HESTON_DELTA_OBS,
    DEFAULT_HESTON_LOG_PRIOR_SD,
    DEFAULT_HESTON_SUBSTEPS,
    DEFAULT_HESTON_THETA,
    DEFAULT_RE_PRIOR_SD,
    DEFAULT_RE_THETA,
    DEFAULT_SSM_THETA,
    OBSERVATION_FLOAT_FORMAT,
)
from cpmcmc.errors import CapabilityError, DataError, ParameterError


def as_theta(theta: object, dim: int) -> np.ndarray:
    result = np.atleast_1d(np.asarray(theta, dtype=float))
    if result.shape != (dim,):
        raise ParameterError(
            f"Expected a parameter vector of length {dim}, got {theta}"
        )
    return result


def check_observations(y: object, obs_dim: int) -> np.ndarray:
    """Returns y as a (T, obs_dim) array, raising DataError if it is unusable"""
    result = np.asarray(y, dtype=float)
    if result.ndim == 1 and obs_dim == 1:
        result = result[:, np.newaxis]
    if result.ndim != 2 or result.shape[1] != obs_dim or result.shape[0] < 1:
        raise DataError(
            f"Expected observations of shape (T, {obs_dim}), got {result.shape}"
        )
    if not np.all(np.isfinite(result)):
        raise DataError("Observations contain non-finite values")
    return result


def _check_length(T: int) -> None:
    if T < 1:
        raise ParameterError(f"T must be at least 1, got {T}")


class StatisticalModel(ABC):
    @property
    @abstractmethod
    def param_names(self) -> Tuple[str, ...]:
        ...

    @property
    def dim(self) -> int:
        return len(self.param_names)

    @property
    @abstractmethod
    def obs_dim(self) -> int:
        ...

    @property
    @abstractmethod
    def true_theta(self) -> np.ndarray:
        """The parameter used to simulate data"""
        ...

    @abstractmethod
    def simulate(self, T: int, rng: np.random.Generator) -> np.ndarray:
        ...

    @abstractmethod
    def prior_logdensity(self, theta: np.ndarray) -> float:
        ...

    @property
    def has_exact_loglik(self) -> bool:
        return False

    def exact_loglik(self, theta: np.ndarray, y: np.ndarray) -> float:
        raise CapabilityError(f"{type(self).__name__} has no exact likelihood")

    def exact_score(self, theta: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise CapabilityError(f"{type(self).__name__} has no exact score")

    def reported_parameters(self, theta: np.ndarray) -> Dict[str, float]:
        """Parameters in the form they are reported in output tables"""
        return dict(zip(self.param_names, (float(v) for v in theta)))


class RandomEffectsModel(StatisticalModel):
    """
    Observations are conditionally independent given independent latent X_t, so the
    likelihood is a product of per-observation integrals, each estimated by
    importance sampling.
    """

    @property
    @abstractmethod
    def aux_dim(self) -> int:
        """Standard normal variates per importance sample"""
        ...

    @abstractmethod
    def is_log_weights(
        self, theta: np.ndarray, y: np.ndarray, cells: np.ndarray
    ) -> np.ndarray:
        """
        log omega(y_t, U_{t,i}; theta) for cells of shape (T, N, p), returned as (T, N)
        """
        ...

    def is_log_weight_grads(
        self, theta: np.ndarray, y: np.ndarray, cells: np.ndarray
    ) -> np.ndarray:
        """d/dtheta log omega, shape (T, N, dim)"""
        raise CapabilityError(f"{type(self).__name__} has no analytic weight gradient")

    def exact_loglik_terms(self, theta: np.ndarray, y: np.ndarray) -> np.ndarray:
        """log p(y_t | theta) for each t"""
        raise CapabilityError(f"{type(self).__name__} has no exact likelihood")


class StateSpaceModel(StatisticalModel):
    """
    A Markov latent process observed with noise. The particle filter proposes from
    the transition density, so weights are observation densities.
    """

    @property
    @abstractmethod
    def state_dim(self) -> int:
        ...

    @property
    @abstractmethod
    def aux_dim(self) -> int:
        ...

    @abstractmethod
    def simulate_states(
        self, T: int, rng: np.random.Generator, theta: Optional[np.ndarray] = None
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (states (T, state_dim), observations (T, obs_dim))"""
        ...

    def simulate(self, T: int, rng: np.random.Generator) -> np.ndarray:
        return self.simulate_states(T, rng)[1]

    @abstractmethod
    def pf_initial(
        self, theta: np.ndarray, y_1: np.ndarray, u: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        Draws the N initial particles from the variates u of shape (N, p). Returns
        (particles (N, state_dim), log weights (N,))
        """
        ...

    @abstractmethod
    def pf_propagate(
        self, theta: np.ndarray, ancestors: np.ndarray, y_t: np.ndarray, u: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Moves resampled ancestors one step forward using u, then weights them"""
        ...


_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _standard_normal_logpdf(residual: np.ndarray) -> np.ndarray:
    return -0.5 * residual * residual - _LOG_SQRT_2PI


@dataclasses.dataclass(frozen=True)
class GaussianREModel(RandomEffectsModel):
    """X_t ~ N(theta, 1), Y_t | X_t ~ N(X_t, 1), so that Y_t ~ N(theta, 2)"""

    theta: float = DEFAULT_RE_THETA
    # zero-mean Gaussian prior
    prior_sd: float = DEFAULT_RE_PRIOR_SD

    def __post_init__(self) -> None:
        if not self.prior_sd > 0:
            raise ParameterError(f"prior_sd must be positive, got {self.prior_sd}")

    @property
    def param_names(self) -> Tuple[str, ...]:
        return ("theta",)

    @property
    def obs_dim(self) -> int:
        return 1

    @property
    def aux_dim(self) -> int:
        return 1

    @property
    def true_theta(self) -> np.ndarray:
        return np.array([self.theta])

    def simulate(self, T: int, rng: np.random.Generator) -> np.ndarray:
        _check_length(T)
        x = self.theta + rng.standard_normal(T)
        return (x + rng.standard_normal(T))[:, np.newaxis]

    def prior_logdensity(self, theta: np.ndarray) -> float:
        return float(scipy.stats.norm.logpdf(theta[0], 0.0, self.prior_sd))

    @property
    def has_exact_loglik(self) -> bool:
        return True

    def exact_loglik_terms(self, theta: np.ndarray, y: np.ndarray) -> np.ndarray:
        y = check_observations(y, 1)
        return scipy.stats.norm.logpdf(y[:, 0], theta[0], math.sqrt(2.0))

    def exact_loglik(self, theta: np.ndarray, y: np.ndarray) -> float:
        return float(np.sum(self.exact_loglik_terms(theta, y)))

    def exact_score(self, theta: np.ndarray, y: np.ndarray) -> np.ndarray:
        y = check_observations(y, 1)
        return np.array([np.sum(y[:, 0] - theta[0]) / 2.0])

    def is_log_weights(
        self, theta: np.ndarray, y: np.ndarray, cells: np.ndarray
    ) -> np.ndarray:
        # the proposal is the prior of X_t, x = theta + u, so the weight is g(y|x)
        return _standard_normal_logpdf(y[:, 0:1] - theta[0] - cells[:, :, 0])

    def is_log_weight_grads(
        self, theta: np.ndarray, y: np.ndarray, cells: np.ndarray
    ) -> np.ndarray:
        return (y[:, 0:1] - theta[0] - cells[:, :, 0])[:, :, np.newaxis]

    def posterior_moments(self, y: np.ndarray) -> Tuple[float, float]:
        """Mean and variance of the conjugate Gaussian posterior"""
        y = check_observations(y, 1)
        precision = y.shape[0] / 2.0 + 1.0 / self.prior_sd**2
        return float(np.sum(y) / 2.0 / precision), 1.0 / precision


def ssm_transition_matrix(theta: float, k: int) -> np.ndarray:
    """A^{ij} = theta^{|i-j|+1}"""
    index = np.arange(k)
    return theta ** (np.abs(index[:, np.newaxis] - index[np.newaxis, :]) + 1.0)


def kalman_loglik(transition: np.ndarray, y: np.ndarray) -> float:
    """
    Prediction error decomposition for X_1 ~ N(0, I), X_{t+1} = A X_t + V,
    Y_t = X_t + W with identity noise covariances
    """
    k = transition.shape[0]
    identity = np.eye(k)
    mean = np.zeros(k)
    cov = identity.copy()
    total = 0.0
    for y_t in y:
        innovation_cov = cov + identity
        total += float(
            scipy.stats.multivariate_normal.logpdf(y_t, mean=mean, cov=innovation_cov)
        )
        # K = P S^{-1}, both symmetric
        gain = np.linalg.solve(innovation_cov, cov).T
        mean = mean + gain @ (y_t - mean)
        cov = cov - gain @ cov
        mean = transition @ mean
        cov = transition @ cov @ transition.T + identity
    return total


def brute_force_loglik(transition: np.ndarray, y: np.ndarray) -> float:
    """Evaluates the joint Gaussian density of the stacked (Y_1, ..., Y_T) directly"""
    T, k = y.shape
    marginal_covs = [np.eye(k)]
    for _ in range(T - 1):
        marginal_covs.append(transition @ marginal_covs[-1] @ transition.T + np.eye(k))

    joint = np.zeros((T * k, T * k))
    for t in range(T):
        for s in range(t + 1):
            # Cov(X_t, X_s) = A^{t-s} P_s
            block = np.linalg.matrix_power(transition, t - s) @ marginal_covs[s]
            joint[t * k : (t + 1) * k, s * k : (s + 1) * k] = block
            joint[s * k : (s + 1) * k, t * k : (t + 1) * k] = block.T
    joint += np.eye(T * k)
    return float(
        scipy.stats.multivariate_normal.logpdf(
            y.reshape(-1), mean=np.zeros(T * k), cov=joint
        )
    )


@dataclasses.dataclass(frozen=True)
class LinearGaussianSSM(StateSpaceModel):
    k: int = 2
    theta: float = DEFAULT_SSM_THETA
    # the prior is uniform on (-prior_bound, prior_bound)
    prior_bound: float = 1.0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ParameterError(f"k must be at least 1, got {self.k}")
        if not self.prior_bound > 0:
            raise ParameterError(
                f"prior_bound must be positive, got {self.prior_bound}"
            )
        self._warn_if_unstable(self.theta)

    def _warn_if_unstable(self, theta: float) -> None:
        radius = float(
            np.max(np.abs(np.linalg.eigvals(ssm_transition_matrix(theta, self.k))))
        )
        if radius >= 1.0:
            logging.warning(
                f"The transition matrix for theta={theta}, k={self.k} has spectral "
                f"radius {radius:.4f} >= 1, the state process is not stationary"
            )

    @property
    def param_names(self) -> Tuple[str, ...]:
        return ("theta",)

    @property
    def obs_dim(self) -> int:
        return self.k

    @property
    def state_dim(self) -> int:
        return self.k

    @property
    def aux_dim(self) -> int:
        return self.k

    @property
    def true_theta(self) -> np.ndarray:
        return np.array([self.theta])

    def transition(self, theta: np.ndarray) -> np.ndarray:
        return ssm_transition_matrix(float(theta[0]), self.k)

    def simulate_states(
        self, T: int, rng: np.random.Generator, theta: Optional[np.ndarray] = None
    ) -> Tuple[np.ndarray, np.ndarray]:
        _check_length(T)
        if theta is None:
            theta = self.true_theta
        else:
            self._warn_if_unstable(float(theta[0]))
        transition = self.transition(theta)
        states = np.empty((T, self.k))
        states[0] = rng.standard_normal(self.k)
        for t in range(1, T):
            states[t] = transition @ states[t - 1] + rng.standard_normal(self.k)
        return states, states + rng.standard_normal((T, self.k))

    def prior_logdensity(self, theta: np.ndarray) -> float:
        if abs(theta[0]) < self.prior_bound:
            return -math.log(2.0 * self.prior_bound)
        return -math.inf

    @property
    def has_exact_loglik(self) -> bool:
        return True

    def exact_loglik(self, theta: np.ndarray, y: np.ndarray) -> float:
        return kalman_loglik(self.transition(theta), check_observations(y, self.k))

    def _observation_logpdf(self, particles: np.ndarray, y_t: np.ndarray) -> np.ndarray:
        return np.sum(_standard_normal_logpdf(y_t[np.newaxis, :] - particles), axis=1)

    def pf_initial(
        self, theta: np.ndarray, y_1: np.ndarray, u: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        particles = u.copy()
        return particles, self._observation_logpdf(particles, y_1)

    def pf_propagate(
        self, theta: np.ndarray, ancestors: np.ndarray, y_t: np.ndarray, u: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        particles = ancestors @ self.transition(theta).T + u
        return particles, self._observation_logpdf(particles, y_t)


def euler_log_variance_step(
    x: np.ndarray,
    eta: np.ndarray,
    mu: float,
    upsilon: float,
    omega: float,
    eps: float,
) -> np.ndarray:
    """One Euler step of the log variance x = log sigma^2"""
    inv_variance = np.exp(-x)
    drift = upsilon * (mu * inv_variance - 1.0) - 0.5 * omega * omega * inv_variance
    return x + eps * drift + math.sqrt(eps) * omega * np.exp(-0.5 * x) * eta


@dataclasses.dataclass(frozen=True)
class HestonPrior:
    """
    Independent log-normal priors on mu, upsilon, omega (log-scale medians below, a
    common log-scale sd) and a uniform prior on chi in (-1, 1)
    """

    mu_median: float = 1.0
    upsilon_median: float = 0.05
    omega_median: float = 0.2
    log_sd: float = DEFAULT_HESTON_LOG_PRIOR_SD

    def logdensity(self, theta: np.ndarray) -> float:
        mu, upsilon, omega, chi = theta
        if mu <= 0 or upsilon <= 0 or omega <= 0 or not -1.0 < chi < 1.0:
            return -math.inf
        medians = (self.mu_median, self.upsilon_median, self.omega_median)
        return float(
            sum(
                scipy.stats.lognorm.logpdf(value, s=self.log_sd, scale=median)
                for value, median in zip((mu, upsilon, omega), medians)
            )
            - math.log(2.0)
        )


@dataclasses.dataclass(frozen=True)
class HestonEulerModel(StateSpaceModel):
    """
    Heston stochastic volatility with leverage, Euler-discretized in the log variance
    with I substeps per observation interval of length delta_obs.

    The state carried between observations is the log variance at the end of the
    interval. Each particle uses I + 1 variates per step: coordinate 0 draws the
    stationary initial variance at t=1 (and is unused afterwards), coordinates 1..I
    drive the volatility shocks.
    """

    mu: float = DEFAULT_HESTON_THETA[0]
    upsilon: float = DEFAULT_HESTON_THETA[1]
    omega: float = DEFAULT_HESTON_THETA[2]
    chi: float = DEFAULT_HESTON_THETA[3]
    I: int = DEFAULT_HESTON_SUBSTEPS  # noqa: E741
    delta_obs: float = DEFAULT_HESTON_DELTA_OBS
    prior: HestonPrior = HestonPrior()

    def __post_init__(self) -> None:
        if not (self.mu > 0 and self.upsilon > 0 and self.omega > 0):
            raise ParameterError(
                f"mu, upsilon and omega must be positive, got {self.mu}, "
                f"{self.upsilon}, {self.omega}"
            )
        if not -1.0 < self.chi < 1.0:
            raise ParameterError(f"chi must lie in (-1, 1), got {self.chi}")
        if self.I < 1 or not self.delta_obs > 0:
            raise ParameterError(
                f"Need I >= 1 and delta_obs > 0, got {self.I}, {self.delta_obs}"
            )

    @property
    def param_names(self) -> Tuple[str, ...]:
        return ("mu", "upsilon", "omega", "chi")

    @property
    def obs_dim(self) -> int:
        return 1

    @property
    def state_dim(self) -> int:
        return 1

    @property
    def aux_dim(self) -> int:
        return self.I + 1

    @property
    def eps(self) -> float:
        return self.delta_obs / self.I

    @property
    def true_theta(self) -> np.ndarray:
        return np.array([self.mu, self.upsilon, self.omega, self.chi])

    def reported_parameters(self, theta: np.ndarray) -> Dict[str, float]:
        mu, upsilon, omega, chi = (float(v) for v in theta)
        return {"mu": mu, "phi": math.exp(-upsilon), "omega": omega, "chi": chi}

    def prior_logdensity(self, theta: np.ndarray) -> float:
        return self.prior.logdensity(theta)

    @staticmethod
    def stationary_gamma(theta: np.ndarray) -> Tuple[float, float]:
        """(shape, rate) of the stationary law of sigma^2"""
        mu, upsilon, omega, _ = theta
        return 2.0 * mu * upsilon / omega**2, 2.0 * upsilon / omega**2

    def stationary_log_variance(self, theta: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Inverts the stationary Gamma CDF at Phi(u), working in the nearer tail"""
        shape, rate = self.stationary_gamma(theta)
        lower = scipy.stats.gamma.ppf(std_normal_cdf(u), shape, scale=1.0 / rate)
        upper = scipy.stats.gamma.isf(std_normal_cdf(-u), shape, scale=1.0 / rate)
        return np.log(np.where(u <= 0.0, lower, upper))

    def interval(
        self, theta: np.ndarray, x0: np.ndarray, eta: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Runs the I Euler substeps of one observation interval from log variance x0
        with shocks eta of shape (N, I). Returns (final log variance, integrated
        variance sigma2_hat, integrated volatility shock gamma_hat), accumulated at
        the left endpoint of each substep.
        """
        mu, upsilon, omega, _ = theta
        eps = self.eps
        x = x0
        sigma2_hat = np.zeros_like(x0)
        gamma_hat = np.zeros_like(x0)
        for i in range(self.I):
            # left endpoint (Ito) sums: substep i contributes the variance at its start
            sigma2_hat = sigma2_hat + eps * np.exp(x)
            gamma_hat = gamma_hat + math.sqrt(eps) * np.exp(0.5 * x) * eta[:, i]
            x = euler_log_variance_step(x, eta[:, i], mu, upsilon, omega, eps)
        return x, sigma2_hat, gamma_hat

    def _observation_logpdf(
        self,
        theta: np.ndarray,
        y_t: np.ndarray,
        sigma2_hat: np.ndarray,
        gamma_hat: np.ndarray,
    ) -> np.ndarray:
        chi = theta[3]
        return scipy.stats.norm.logpdf(
            y_t[0], chi * gamma_hat, np.sqrt((1.0 - chi * chi) * sigma2_hat)
        )

    def simulate_states(
        self, T: int, rng: np.random.Generator, theta: Optional[np.ndarray] = None
    ) -> Tuple[np.ndarray, np.ndarray]:
        _check_length(T)
        if theta is None:
            theta = self.true_theta
        chi = theta[3]
        shape, rate = self.stationary_gamma(theta)
        x = np.log(np.atleast_1d(rng.gamma(shape, 1.0 / rate)))
        states = np.empty((T, 1))
        y = np.empty((T, 1))
        for t in range(T):
            eta = rng.standard_normal((1, self.I))
            x, sigma2_hat, gamma_hat = self.interval(theta, x, eta)
            y[t, 0] = chi * gamma_hat[0] + math.sqrt(
                (1.0 - chi * chi) * sigma2_hat[0]
            ) * rng.standard_normal()
            states[t, 0] = x[0]
        return states, y

    def pf_initial(
        self, theta: np.ndarray, y_1: np.ndarray, u: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        x0 = self.stationary_log_variance(theta, u[:, 0])
        x, sigma2_hat, gamma_hat = self.interval(theta, x0, u[:, 1:])
        return x[:, np.newaxis], self._observation_logpdf(
            theta, y_1, sigma2_hat, gamma_hat
        )

    def pf_propagate(
        self, theta: np.ndarray, ancestors: np.ndarray, y_t: np.ndarray, u: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        x, sigma2_hat, gamma_hat = self.interval(theta, ancestors[:, 0], u[:, 1:])
        return x[:, np.newaxis], self._observation_logpdf(
            theta, y_t, sigma2_hat, gamma_hat
        )


def _proposal_cholesky(cov: np.ndarray, dim: int) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (dim, dim):
        raise ParameterError(f"Expected a {dim}x{dim} covariance, got {cov.shape}")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise ParameterError("Proposal covariance is not positive definite") from e


def rw_propose(
    theta: np.ndarray, step_cov: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Symmetric Gaussian random walk, theta' = theta + L xi with L L^T = step_cov"""
    chol = _proposal_cholesky(step_cov, theta.shape[0])
    return theta + chol @ rng.standard_normal(theta.shape[0])


def ar_propose(
    theta: np.ndarray,
    center: np.ndarray,
    coefficient: float,
    cov: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Autoregressive proposal theta' = c + a (theta - c) + sqrt(1 - a^2) L xi, which is
    reversible with respect to N(c, cov)
    """
    if not -1.0 < coefficient < 1.0:
        raise ParameterError(f"AR coefficient must lie in (-1, 1), got {coefficient}")
    chol = _proposal_cholesky(cov, theta.shape[0])
    return (
        center
        + coefficient * (theta - center)
        + math.sqrt(1.0 - coefficient**2) * (chol @ rng.standard_normal(theta.shape[0]))
    )


def ar_log_proposal_ratio(
    theta: np.ndarray, theta_prop: np.ndarray, center: np.ndarray, cov: np.ndarray
) -> float:
    """log q(theta', theta) - log q(theta, theta') for ar_propose"""
    reference = scipy.stats.multivariate_normal(mean=center, cov=cov)
    return float(reference.logpdf(theta) - reference.logpdf(theta_prop))


def observations_frame(y: np.ndarray) -> pd.DataFrame:
    """Columns t,y1,...,yk with t starting at 1"""
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, np.newaxis]
    df = pd.DataFrame(y, columns=[f"y{j + 1}" for j in range(y.shape[1])])
    df.insert(0, "t", np.arange(1, y.shape[0] + 1))
    return df


def write_observations(path: str, y: np.ndarray) -> None:
    observations_frame(y).to_csv(
        path, index=False, float_format=OBSERVATION_FLOAT_FORMAT
    )


def read_observations(path: str) -> np.ndarray:
    df = pd.read_csv(path, comment="#")
    expected = ["t"] + [f"y{j + 1}" for j in range(df.shape[1] - 1)]
    if list(df.columns) != expected or df.shape[1] < 2:
        raise DataError(
            f"{path} should have header {','.join(expected)}, got "
            f"{','.join(df.columns)}"
        )
    return check_observations(df.iloc[:, 1:].to_numpy(dtype=float), df.shape[1] - 1)
