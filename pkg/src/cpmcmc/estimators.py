"""
Unbiased likelihood estimators that are deterministic functions of (theta, U):
per-observation importance sampling for random effects models and the Hilbert-sorted
particle filter for state-space models. Estimates are kept on the log scale.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from abc import ABC, abstractmethod
from typing import Callable, Optional

import numpy as np
import scipy.special

from cpmcmc.auxiliary import AuxBlock, AuxLayout, std_normal_cdf
from cpmcmc.config import (
    DEFAULT_HILBERT_ORDER,
    DEFAULT_IS_CHUNK_ROWS,
    PILOT_PROJECTION_LENGTH,
)
from cpmcmc.errors import CapabilityError, DegenerateEstimateError, ParameterError
from cpmcmc.hilbert import (
    LogisticProjection,
    hilbert_key,
    lexicographic_rank,
    pilot_projection,
)
from cpmcmc.models import RandomEffectsModel, StateSpaceModel, StatisticalModel

SortKey = Callable[[np.ndarray], np.ndarray]


@dataclasses.dataclass(frozen=True)
class LoglikEstimate:
    # log p_hat(y_{1:T} | theta, U)
    value: float
    # log of each per-observation factor, summing to value
    per_obs: Optional[np.ndarray] = None


class Estimator(ABC):
    """A map (theta, U) -> log likelihood estimate with a declared layout for U"""

    N: int

    @abstractmethod
    def layout(self, model: StatisticalModel, T: int) -> AuxLayout:
        ...

    @abstractmethod
    def loglik(
        self, model: StatisticalModel, theta: np.ndarray, y: np.ndarray, u: AuxBlock
    ) -> LoglikEstimate:
        ...

    @abstractmethod
    def with_particles(self, N: int) -> Estimator:
        """The same estimator with N particles, any fitted projection kept"""
        ...

    def score(
        self, model: StatisticalModel, theta: np.ndarray, y: np.ndarray, u: AuxBlock
    ) -> np.ndarray:
        """Gradient in theta of log p_hat at fixed U"""
        raise CapabilityError(f"{type(self).__name__} has no simulated score")


def _check_layout(
    estimator: Estimator, model: StatisticalModel, y: np.ndarray, u: AuxBlock
) -> None:
    expected = estimator.layout(model, y.shape[0])
    if u.layout != expected:
        raise ParameterError(
            f"Expected an auxiliary block with {expected}, got {u.layout}"
        )


def _degenerate_row(log_weights: np.ndarray) -> Optional[int]:
    """0-based index of the first row with no positive, well-defined weight"""
    bad = ~(np.max(log_weights, axis=-1) > -np.inf)
    if np.any(bad):
        return int(np.argmax(bad))
    return None


@dataclasses.dataclass(frozen=True)
class ISEstimator(Estimator):
    N: int
    # observations evaluated per vectorized block, which only bounds memory
    chunk_rows: int = DEFAULT_IS_CHUNK_ROWS

    def __post_init__(self) -> None:
        if self.N < 1 or self.chunk_rows < 1:
            raise ParameterError(
                f"N and chunk_rows must be positive, got {self.N}, {self.chunk_rows}"
            )

    def layout(self, model: StatisticalModel, T: int) -> AuxLayout:
        if not isinstance(model, RandomEffectsModel):
            raise CapabilityError(
                f"Importance sampling needs a random effects model, got "
                f"{type(model).__name__}"
            )
        return AuxLayout.importance_sampling(T, self.N, model.aux_dim)

    def loglik(
        self, model: StatisticalModel, theta: np.ndarray, y: np.ndarray, u: AuxBlock
    ) -> LoglikEstimate:
        return is_loglik(self, model, theta, y, u)

    def score(
        self, model: StatisticalModel, theta: np.ndarray, y: np.ndarray, u: AuxBlock
    ) -> np.ndarray:
        return is_score(self, model, theta, y, u)

    def with_particles(self, N: int) -> ISEstimator:
        return dataclasses.replace(self, N=N)


def is_loglik(
    est: ISEstimator,
    model: StatisticalModel,
    theta: np.ndarray,
    y: np.ndarray,
    u: AuxBlock,
) -> LoglikEstimate:
    """sum_t log{(1/N) sum_i omega(y_t, U_{t,i}; theta)}"""
    _check_layout(est, model, y, u)
    assert isinstance(model, RandomEffectsModel)

    T = y.shape[0]
    cells = u.cells
    log_n = math.log(est.N)
    per_obs = np.empty(T)
    for start in range(0, T, est.chunk_rows):
        stop = min(start + est.chunk_rows, T)
        log_weights = model.is_log_weights(theta, y[start:stop], cells[start:stop])
        degenerate = _degenerate_row(log_weights)
        if degenerate is not None:
            raise DegenerateEstimateError(start + degenerate + 1)
        per_obs[start:stop] = scipy.special.logsumexp(log_weights, axis=1) - log_n
    return LoglikEstimate(float(np.sum(per_obs)), per_obs)


def is_score(
    est: ISEstimator,
    model: StatisticalModel,
    theta: np.ndarray,
    y: np.ndarray,
    u: AuxBlock,
) -> np.ndarray:
    """
    The simulated score: for each t, the self-normalized weighted average of the
    gradients of log omega, summed over t
    """
    _check_layout(est, model, y, u)
    assert isinstance(model, RandomEffectsModel)

    T = y.shape[0]
    cells = u.cells
    total = np.zeros(theta.shape[0])
    for start in range(0, T, est.chunk_rows):
        stop = min(start + est.chunk_rows, T)
        log_weights = model.is_log_weights(theta, y[start:stop], cells[start:stop])
        degenerate = _degenerate_row(log_weights)
        if degenerate is not None:
            raise DegenerateEstimateError(start + degenerate + 1)
        normalized = np.exp(
            log_weights - scipy.special.logsumexp(log_weights, axis=1, keepdims=True)
        )
        grads = model.is_log_weight_grads(theta, y[start:stop], cells[start:stop])
        total += np.einsum("tn,tnd->d", normalized, grads)
    return total


@dataclasses.dataclass(frozen=True)
class Resampling:
    # order[j] is the original index of the particle in sorted position j
    order: np.ndarray
    # ancestors[i] is a sorted position
    ancestors: np.ndarray

    def original_indices(self) -> np.ndarray:
        return self.order[self.ancestors]


def sorted_systematic_resample(
    weights: np.ndarray,
    particles: np.ndarray,
    u_r: float,
    key_fn: SortKey,
    t: int = 0,
) -> Resampling:
    """
    Sorts the particles by key_fn (ties broken by original index), then inverts the
    cumulative sorted weights at the N stratified points (i - 1 + Phi(u_r)) / N
    sharing the single uniform Phi(u_r).

    t is only used to label a degeneracy error.
    """
    weights = np.asarray(weights, dtype=float)
    n = weights.shape[0]
    total = float(np.sum(weights))
    if not (total > 0 and math.isfinite(total)) or np.any(weights < 0):
        raise DegenerateEstimateError(t)

    order = np.argsort(key_fn(particles), kind="stable")
    cumulative = np.cumsum(weights[order]) / total
    cumulative[-1] = 1.0
    # a uniform of exactly 0 would select a leading zero-weight particle
    uniform = max(float(std_normal_cdf(u_r)), np.nextafter(0.0, 1.0))
    points = (np.arange(n) + uniform) / n
    ancestors = np.minimum(np.searchsorted(cumulative, points, side="left"), n - 1)
    return Resampling(order, ancestors)


def _log_mean_weight(log_weights: np.ndarray, t: int) -> float:
    if not np.max(log_weights) > -np.inf:
        raise DegenerateEstimateError(t)
    return float(scipy.special.logsumexp(log_weights) - math.log(log_weights.shape[0]))


@dataclasses.dataclass(frozen=True)
class PFEstimator(Estimator):
    """
    Particle filter with Hilbert sorted systematic resampling, driven by one common
    resampling variate per step so the estimate is continuous in (theta, U).

    projection maps states into the unit cube before the Hilbert key is taken. It is
    fixed for the lifetime of the estimator, the default is the standard logistic.
    """

    N: int
    projection: Optional[LogisticProjection] = None
    hilbert_order: int = DEFAULT_HILBERT_ORDER

    def __post_init__(self) -> None:
        if self.N < 1:
            raise ParameterError(f"N must be positive, got {self.N}")

    def layout(self, model: StatisticalModel, T: int) -> AuxLayout:
        if not isinstance(model, StateSpaceModel):
            raise CapabilityError(
                f"The particle filter needs a state-space model, got "
                f"{type(model).__name__}"
            )
        return AuxLayout.particle_filter(T, self.N, model.aux_dim)

    def loglik(
        self, model: StatisticalModel, theta: np.ndarray, y: np.ndarray, u: AuxBlock
    ) -> LoglikEstimate:
        return pf_loglik(self, model, theta, y, u)

    def with_particles(self, N: int) -> PFEstimator:
        return dataclasses.replace(self, N=N)

    def with_pilot_projection(
        self, model: StateSpaceModel, theta: np.ndarray, rng: np.random.Generator
    ) -> PFEstimator:
        """A copy whose projection is fitted to a simulated state path at theta"""
        states, _ = model.simulate_states(PILOT_PROJECTION_LENGTH, rng, theta)
        return dataclasses.replace(self, projection=pilot_projection(states))


def pf_loglik(
    est: PFEstimator,
    model: StatisticalModel,
    theta: np.ndarray,
    y: np.ndarray,
    u: AuxBlock,
) -> LoglikEstimate:
    _check_layout(est, model, y, u)
    assert isinstance(model, StateSpaceModel)

    T = y.shape[0]
    cells = u.cells
    resampling_variates = u.resampling
    projection = est.projection or LogisticProjection.standard(model.state_dim)
    hilbert_sort = functools.partial(
        hilbert_key, projection=projection, order=est.hilbert_order
    )

    per_obs = np.empty(T)
    particles, log_weights = model.pf_initial(theta, y[0], cells[0])
    per_obs[0] = _log_mean_weight(log_weights, 1)
    for t in range(1, T):
        # the initial particles are sorted on their raw values, later generations
        # along the Hilbert curve
        key_fn: SortKey = lexicographic_rank if t == 1 else hilbert_sort
        resampling = sorted_systematic_resample(
            np.exp(log_weights - np.max(log_weights)),
            particles,
            float(resampling_variates[t - 1]),
            key_fn,
            t,
        )
        ancestors = particles[resampling.original_indices()]
        particles, log_weights = model.pf_propagate(theta, ancestors, y[t], cells[t])
        per_obs[t] = _log_mean_weight(log_weights, t + 1)
    return LoglikEstimate(float(np.sum(per_obs)), per_obs)


def estimator_for(
    model: StatisticalModel, N: int, projection: Optional[LogisticProjection] = None
) -> Estimator:
    """Importance sampling for random effects models, the particle filter otherwise"""
    if isinstance(model, RandomEffectsModel):
        return ISEstimator(N)
    elif isinstance(model, StateSpaceModel):
        return PFEstimator(N, projection)
    else:
        raise CapabilityError(f"No likelihood estimator for {type(model).__name__}")
