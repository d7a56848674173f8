"""
Measurements on chains and estimators: integrated autocorrelation times, the
log-likelihood estimation errors Z, W, R and their CLT moment relations, the score
error Psi and its slow/fast decomposition.

Z = log p_hat(y|theta,U) - log p(y|theta) at the current U, W the same at the proposed
U', and R = W - Z, which is what enters the acceptance probability at fixed theta.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.fft
import scipy.special

from cpmcmc.auxiliary import (
    AuxBlock,
    CorrelationParam,
    cn_step,
    sample_fresh,
    std_normal_cdf,
)
from cpmcmc.config import (
    MIN_IACT_LENGTH,
    MIN_MOMENT_CHECK_SAMPLES,
    MIN_STATIONARY_BURN_IN,
    MOMENT_CHECK_THRESHOLD,
    STATIONARY_BURN_IN_MULTIPLE,
)
from cpmcmc.errors import (
    CapabilityError,
    DegenerateEstimateError,
    ParameterError,
    UndefinedIACTError,
)
from cpmcmc.estimators import Estimator
from cpmcmc.local_runner import local_map
from cpmcmc.models import RandomEffectsModel, StatisticalModel
from cpmcmc.samplers import ChainTrace, metropolis_accept
from cpmcmc.streams import RandomStreams

CutoffRule = Literal["geyer", "threshold"]
SamplingMode = Literal["proposal_m", "stationary"]


def autocorrelation(series: np.ndarray) -> np.ndarray:
    """Sample autocorrelations at lags 0..n-1, via the FFT"""
    x = np.asarray(series, dtype=float)
    n = x.shape[0]
    centered = x - np.mean(x)
    size = scipy.fft.next_fast_len(2 * n)
    spectrum = scipy.fft.rfft(centered, n=size)
    autocov = scipy.fft.irfft(spectrum * np.conjugate(spectrum), n=size)[:n] / n
    return autocov / autocov[0]


def iact(series: np.ndarray, cutoff: CutoffRule = "geyer") -> float:
    """
    Integrated autocorrelation time 1 + 2 sum_{n=1}^{L} rho_n.

    The "geyer" rule sums consecutive pairs rho_{2m} + rho_{2m+1} while they stay
    positive (the initial positive sequence estimator). The "threshold" rule stops
    before the first lag whose autocorrelation drops below 2/sqrt(len).
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or x.shape[0] < MIN_IACT_LENGTH:
        raise UndefinedIACTError(
            f"Need a 1-d series of length at least {MIN_IACT_LENGTH}, got shape "
            f"{x.shape}"
        )
    if not np.all(np.isfinite(x)):
        raise UndefinedIACTError("The series contains non-finite values")
    if np.ptp(x) == 0:
        raise UndefinedIACTError("The IACT of a constant series is undefined")

    rho = autocorrelation(x)
    if cutoff == "geyer":
        n_pairs = rho.shape[0] // 2
        pairs = rho[0 : 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
        non_positive = np.flatnonzero(pairs <= 0)
        stop = non_positive[0] if non_positive.shape[0] else n_pairs
        return float(-1.0 + 2.0 * np.sum(pairs[:stop]))
    elif cutoff == "threshold":
        below = np.flatnonzero(rho[1:] < 2.0 / math.sqrt(x.shape[0]))
        stop = below[0] + 1 if below.shape[0] else rho.shape[0]
        return float(1.0 + 2.0 * np.sum(rho[1:stop]))
    else:
        raise ParameterError(f"Unknown cutoff rule {cutoff}")


def effective_sample_size(series: np.ndarray, cutoff: CutoffRule = "geyer") -> float:
    return np.asarray(series).shape[0] / iact(series, cutoff)


def batch_means_stderr(series: np.ndarray) -> float:
    """Standard error of the mean of series, using sqrt(n) non-overlapping batches"""
    x = np.asarray(series, dtype=float)
    n_batches = int(math.isqrt(x.shape[0]))
    if n_batches < 2:
        raise ValueError(f"Need at least 4 values, got {x.shape[0]}")
    batch_size = x.shape[0] // n_batches
    means = x[: n_batches * batch_size].reshape(n_batches, batch_size).mean(axis=1)
    return float(np.std(means, ddof=1) / math.sqrt(n_batches))


@dataclasses.dataclass(frozen=True)
class DiagnosticsSummary:
    # per monitored parameter
    if_estimate: Dict[str, float]
    ess: Dict[str, float]
    acc_rate: float
    n: int
    # Var(R) at stationarity and Var(Z), when measured
    kappa_sq: Optional[float] = None
    sigma_sq: Optional[float] = None

    def to_frame(self) -> pd.DataFrame:
        rows: List[Dict[str, object]] = [
            {"stat": f"if_{name}", "value": value}
            for name, value in self.if_estimate.items()
        ]
        rows.extend(
            {"stat": f"ess_{name}", "value": value} for name, value in self.ess.items()
        )
        rows.append({"stat": "acc_rate", "value": self.acc_rate})
        rows.append({"stat": "n", "value": float(self.n)})
        if self.kappa_sq is not None:
            rows.append({"stat": "kappa_sq", "value": self.kappa_sq})
        if self.sigma_sq is not None:
            rows.append({"stat": "sigma_sq", "value": self.sigma_sq})
        df = pd.DataFrame(rows, columns=["stat", "value"])
        df["stderr"] = math.nan
        df["flag"] = 0
        return df


def summarize_chain(
    trace: ChainTrace,
    burn_in: int = 0,
    kappa_sq: Optional[float] = None,
    sigma_sq: Optional[float] = None,
    cutoff: CutoffRule = "geyer",
) -> DiagnosticsSummary:
    if burn_in:
        trace = trace.discard_burn_in(burn_in)
    if_estimate = {}
    ess = {}
    for j, name in enumerate(trace.param_names):
        try:
            value = iact(trace.theta[:, j], cutoff)
        except UndefinedIACTError as e:
            logging.warning(f"No IF for {name}: {e}")
            value = math.nan
        if_estimate[name] = value
        ess[name] = len(trace) / value
    return DiagnosticsSummary(
        if_estimate, ess, trace.acceptance_rate, len(trace), kappa_sq, sigma_sq
    )


@dataclasses.dataclass(frozen=True)
class LoglikRatioSamples:
    # log p_hat at the current U and at the proposed U'
    current: np.ndarray
    proposed: np.ndarray
    # acceptance rate of the U-chain (stationary), or mean of min(1, e^R) (proposal_m)
    acceptance: float
    mode: str
    # Psi(theta, U_n) at the current U, when recorded
    psi: Optional[np.ndarray] = None

    @property
    def r(self) -> np.ndarray:
        return self.proposed - self.current


@dataclasses.dataclass(frozen=True)
class LoglikErrorSamples:
    z: np.ndarray
    w: np.ndarray
    acceptance: float
    mode: str

    @property
    def r(self) -> np.ndarray:
        return self.w - self.z


def stationary_burn_in(correlation: CorrelationParam) -> int:
    """Iterations needed for a U-chain started from N(0, I) to forget its start"""
    if correlation.rho >= 1.0:
        return 0
    return max(
        MIN_STATIONARY_BURN_IN,
        int(math.ceil(STATIONARY_BURN_IN_MULTIPLE / (1.0 - correlation.rho))),
    )


def _safe_loglik(
    estimator: Estimator,
    model: StatisticalModel,
    theta: np.ndarray,
    y: np.ndarray,
    u: AuxBlock,
) -> float:
    try:
        return estimator.loglik(model, theta, y, u).value
    except DegenerateEstimateError:
        return -math.inf


def _score_error_at(
    estimator: Estimator,
    model: StatisticalModel,
    theta: np.ndarray,
    y: np.ndarray,
    u: AuxBlock,
) -> np.ndarray:
    return estimator.score(model, theta, y, u) - model.exact_score(theta, y)


def loglik_ratio_samples(
    model: StatisticalModel,
    y: np.ndarray,
    theta: np.ndarray,
    estimator: Estimator,
    correlation: CorrelationParam,
    n_samples: int,
    mode: SamplingMode,
    streams: RandomStreams,
    burn_in: Optional[int] = None,
    record_psi: bool = False,
) -> LoglikRatioSamples:
    """
    Log-estimate pairs (current, proposed) at fixed theta. No likelihood oracle is
    needed, so this also works for models without one.

    proposal_m draws U ~ N(0, I) afresh for every sample and U' from the
    Crank-Nicolson kernel. stationary runs the U-only CPM chain (theta fixed, U'
    accepted with probability min{1, p_hat(U')/p_hat(U)}) and records every proposal.
    """
    if n_samples < 1:
        raise ParameterError(f"n_samples must be positive, got {n_samples}")
    theta = np.asarray(theta, dtype=float)
    layout = estimator.layout(model, y.shape[0])
    current = np.empty(n_samples)
    proposed = np.empty(n_samples)
    psi: Optional[np.ndarray] = None
    if record_psi:
        psi = np.empty((n_samples, theta.shape[0]))

    if mode == "proposal_m":
        for n in range(n_samples):
            u = sample_fresh(layout, streams.auxiliary(n))
            u_prop = cn_step(u, correlation, streams.proposal(n))
            current[n] = _safe_loglik(estimator, model, theta, y, u)
            proposed[n] = _safe_loglik(estimator, model, theta, y, u_prop)
            if psi is not None:
                psi[n] = _score_error_at(estimator, model, theta, y, u)
        with np.errstate(invalid="ignore"):
            acceptance = float(np.mean(np.minimum(1.0, np.exp(proposed - current))))
        return LoglikRatioSamples(current, proposed, acceptance, mode, psi)

    if mode != "stationary":
        raise ParameterError(f"Unknown sampling mode {mode}")

    if burn_in is None:
        burn_in = stationary_burn_in(correlation)
    u = sample_fresh(layout, streams.initial())
    log_est = estimator.loglik(model, theta, y, u).value
    psi_current = None
    if psi is not None:
        psi_current = _score_error_at(estimator, model, theta, y, u)
    accepted = 0
    for iteration in range(burn_in + n_samples):
        u_prop = cn_step(u, correlation, streams.auxiliary(iteration))
        log_est_prop = _safe_loglik(estimator, model, theta, y, u_prop)
        n = iteration - burn_in
        if n >= 0:
            current[n] = log_est
            proposed[n] = log_est_prop
            if psi is not None:
                psi[n] = psi_current
        if metropolis_accept(log_est_prop - log_est, streams.accept(iteration)):
            u, log_est = u_prop, log_est_prop
            if psi is not None:
                psi_current = _score_error_at(estimator, model, theta, y, u)
            if n >= 0:
                accepted += 1
    return LoglikRatioSamples(current, proposed, accepted / n_samples, mode, psi)


def loglik_error_samples(
    model: StatisticalModel,
    y: np.ndarray,
    theta: np.ndarray,
    estimator: Estimator,
    correlation: CorrelationParam,
    n_samples: int,
    mode: SamplingMode,
    streams: RandomStreams,
    burn_in: Optional[int] = None,
) -> LoglikErrorSamples:
    """Z and W relative to the exact log likelihood, see loglik_ratio_samples"""
    if not model.has_exact_loglik:
        raise CapabilityError(
            f"{type(model).__name__} has no exact likelihood to measure errors against"
        )
    theta = np.asarray(theta, dtype=float)
    exact = model.exact_loglik(theta, y)
    samples = loglik_ratio_samples(
        model, y, theta, estimator, correlation, n_samples, mode, streams, burn_in
    )
    return LoglikErrorSamples(
        samples.current - exact, samples.proposed - exact, samples.acceptance, mode
    )


def _moment_row(
    stat: str, samples: np.ndarray, sign: float, flagged: bool
) -> Dict[str, object]:
    """
    Checks mean(x) + sign * Var(x)/2 = 0. The standard error comes from batch means
    of x + sign * (x - mean)^2 / 2, whose mean is the checked statistic.
    """
    mean = float(np.mean(samples))
    value = mean + sign * 0.5 * float(np.var(samples))
    stderr = batch_means_stderr(samples + sign * 0.5 * (samples - mean) ** 2)
    flag = flagged and abs(value) > MOMENT_CHECK_THRESHOLD * stderr
    return {"stat": stat, "value": value, "stderr": stderr, "flag": int(flag)}


def _variance_row(stat: str, samples: np.ndarray) -> Dict[str, object]:
    centered_sq = (samples - np.mean(samples)) ** 2
    return {
        "stat": stat,
        "value": float(np.mean(centered_sq)),
        "stderr": batch_means_stderr(centered_sq),
        "flag": 0,
    }


def clt_moment_checks(
    z_samples: Optional[np.ndarray] = None,
    r_samples: Optional[np.ndarray] = None,
    z_stationary_samples: Optional[np.ndarray] = None,
) -> pd.DataFrame:
    """
    Moment identities of the limiting laws: Z ~ N(-sigma^2/2, sigma^2) for z_samples
    taken under U ~ N(0, I), R ~ N(-kappa^2/2, kappa^2) for the stationary ratios,
    and optionally Z ~ N(+sigma^2/2, sigma^2) for z_stationary_samples, errors taken
    from the U-marginal of the chain at stationarity. Returns rows
    stat,value,stderr,flag where flag = 1 when an identity is violated by more than 3
    standard errors.
    """
    rows = []
    checks: Sequence[Tuple[str, Optional[np.ndarray], float]] = (
        ("z_proposal", z_samples, 1.0),
        ("r", r_samples, 1.0),
        ("z_stationary", z_stationary_samples, -1.0),
    )
    for name, samples, sign in checks:
        if samples is None:
            continue
        samples = np.asarray(samples, dtype=float)
        if samples.shape[0] < MIN_MOMENT_CHECK_SAMPLES:
            raise ValueError(
                f"Need at least {MIN_MOMENT_CHECK_SAMPLES} {name} samples, got "
                f"{samples.shape[0]}"
            )
        identity = "mean_plus_half_var" if sign > 0 else "mean_minus_half_var"
        rows.append(_moment_row(f"{name}_{identity}", samples, sign, True))
        rows.append(_variance_row(f"{name}_var", samples))
    return pd.DataFrame(rows, columns=["stat", "value", "stderr", "flag"])


def normalized_weight_variance(
    model: StatisticalModel,
    theta: np.ndarray,
    y: np.ndarray,
    u: AuxBlock,
) -> float:
    """
    Sample variance of the normalized importance weights omega / p(y_t | theta)
    pooled over t and particles, an estimate of gamma(theta)^2
    """
    if not isinstance(model, RandomEffectsModel):
        raise CapabilityError("Normalized weights need a random effects model")
    log_weights = model.is_log_weights(theta, y, u.cells)
    exact = model.exact_loglik_terms(theta, y)
    return float(np.var(np.exp(log_weights - exact[:, np.newaxis]), ddof=1))


@dataclasses.dataclass(frozen=True)
class ScoreError:
    # grad log p_hat - grad log p at the monitored parameter
    psi: np.ndarray


def score_error(
    model: StatisticalModel,
    estimator: Estimator,
    theta_hat: np.ndarray,
    y: np.ndarray,
    u: AuxBlock,
) -> ScoreError:
    theta_hat = np.asarray(theta_hat, dtype=float)
    return ScoreError(_score_error_at(estimator, model, theta_hat, y, u))


def slow_fast_decompose(
    theta_trace: np.ndarray,
    psi_trace: np.ndarray,
    theta_hat: np.ndarray,
    sigma_bar: np.ndarray,
    T: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    f_hat_n = theta_hat + (sigma_bar / T) Psi_n, the slowly moving part of the chain
    driven by U, and g_hat_n = theta_n - f_hat_n, the fast part
    """
    theta_trace = np.asarray(theta_trace, dtype=float)
    psi_trace = np.asarray(psi_trace, dtype=float)
    if theta_trace.shape[0] != psi_trace.shape[0]:
        raise ValueError(
            f"Traces have different lengths: {theta_trace.shape[0]} and "
            f"{psi_trace.shape[0]}"
        )
    one_dimensional = theta_trace.ndim == 1
    theta_2d = theta_trace.reshape(theta_trace.shape[0], -1)
    psi_2d = psi_trace.reshape(psi_trace.shape[0], -1)
    sigma_bar = np.atleast_2d(np.asarray(sigma_bar, dtype=float))
    if not np.all(np.linalg.eigvalsh(sigma_bar) > 0):
        raise ParameterError("sigma_bar must be positive definite")

    f_hat = np.atleast_1d(theta_hat)[np.newaxis, :] + psi_2d @ sigma_bar.T / T
    g_hat = theta_2d - f_hat
    if one_dimensional:
        return f_hat[:, 0], g_hat[:, 0]
    return f_hat, g_hat


def score_if_envelopes(delta: float, acceptance: float) -> Tuple[float, float]:
    """(1 / (delta acc), 2 / (delta acc)), the band expected to contain IF(Psi)"""
    if not (delta > 0 and acceptance > 0):
        raise ParameterError(
            f"delta and acceptance must be positive, got {delta}, {acceptance}"
        )
    lower = 1.0 / (delta * acceptance)
    return lower, 2.0 * lower


def acceptance_lower_bound(kappa: float, exact_acceptance: float) -> float:
    """rho_u(kappa) times the acceptance rate of exact MH with the same proposal"""
    return float(2.0 * std_normal_cdf(-kappa / 2.0)) * exact_acceptance


def _score_if_point(
    model: StatisticalModel,
    y: np.ndarray,
    theta_hat: np.ndarray,
    estimator: Estimator,
    rho: float,
    n_iters: int,
    streams: RandomStreams,
    burn_in: Optional[int],
) -> Dict[str, float]:
    correlation = CorrelationParam.direct(rho)
    samples = loglik_ratio_samples(
        model,
        y,
        theta_hat,
        estimator,
        correlation,
        n_iters,
        "stationary",
        streams,
        burn_in,
        record_psi=True,
    )
    assert samples.psi is not None
    delta = -math.log(rho)
    lower, upper = score_if_envelopes(delta, samples.acceptance)
    if_psi = iact(samples.psi[:, 0])
    return {
        "N": float(estimator.N),
        "rho": rho,
        "delta": delta,
        "kappa_sq": float(np.var(samples.r)),
        "acc_rate": samples.acceptance,
        "if_psi": if_psi,
        "lower": lower,
        "upper": upper,
        "within": float(lower <= if_psi <= upper),
    }


def score_if_vs_delta(
    model: StatisticalModel,
    y: np.ndarray,
    theta_hat: np.ndarray,
    grid: Sequence[Tuple[Estimator, float]],
    n_iters: int,
    streams: RandomStreams,
    burn_in: Optional[int] = None,
    jobs: int = 1,
) -> pd.DataFrame:
    """
    For each (estimator, rho) grid point, runs the U-chain at theta_hat and compares
    IF(Psi) with the 1/(delta acc) and 2/(delta acc) envelopes
    """
    rows = local_map(
        _score_if_point,
        [
            (
                model,
                y,
                theta_hat,
                estimator,
                rho,
                n_iters,
                streams.replicate(j),
                burn_in,
            )
            for j, (estimator, rho) in enumerate(grid)
        ],
        jobs,
    )
    return pd.DataFrame(rows)


def log_mean_exp(values: np.ndarray) -> float:
    """log of the mean of exp(values), e.g. to average p_hat / p over replicates"""
    values = np.asarray(values, dtype=float)
    return float(scipy.special.logsumexp(values) - math.log(values.shape[0]))


@dataclasses.dataclass(frozen=True)
class ErrorMeasurement:
    # Var(R) from the stationary U-chain and Var(Z) under U ~ N(0, I)
    kappa_sq: float
    sigma_sq: float
    # clt_moment_checks rows, empty when there were too few samples
    checks: pd.DataFrame


def measure_loglik_errors(
    model: StatisticalModel,
    y: np.ndarray,
    theta: np.ndarray,
    estimator: Estimator,
    correlation: CorrelationParam,
    n_samples: int,
    streams: RandomStreams,
) -> ErrorMeasurement:
    """
    kappa^2 and sigma^2 at theta. Var(Z) is the variance of log p_hat under fresh U,
    so it needs no exact likelihood. The mean of Z, and so its moment check, does.
    """
    stationary = loglik_ratio_samples(
        model,
        y,
        theta,
        estimator,
        correlation,
        n_samples,
        "stationary",
        streams.replicate(0),
    )
    fresh = loglik_ratio_samples(
        model,
        y,
        theta,
        estimator,
        correlation,
        n_samples,
        "proposal_m",
        streams.replicate(1),
    )
    r = stationary.r
    finite = bool(np.all(np.isfinite(r)) and np.all(np.isfinite(fresh.current)))
    kappa_sq = float(np.var(r)) if np.all(np.isfinite(r)) else math.inf
    sigma_sq = float(np.var(fresh.current)) if finite else math.inf

    checks = pd.DataFrame(columns=["stat", "value", "stderr", "flag"])
    if n_samples < MIN_MOMENT_CHECK_SAMPLES or not finite:
        logging.info(f"Skipping moment checks on {n_samples} samples")
    else:
        z = None
        if model.has_exact_loglik:
            z = fresh.current - model.exact_loglik(np.asarray(theta, dtype=float), y)
        checks = clt_moment_checks(z, r)
    return ErrorMeasurement(kappa_sq, sigma_sq, checks)
