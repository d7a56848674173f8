"""
Closed-form efficiency curves for the CPM limit and simulators for the chains they
describe.

In the large-data limit the CPM kernel behaves like the penalty method: exact MH whose
log acceptance ratio is perturbed by independent N(-kappa^2/2, kappa^2) noise. Its
inefficiency is bounded by Q*, a lazy version of exact MH that moves with probability
rho_u(kappa). The relative computing time bound ARCT trades this inefficiency against
the particle cost, which is proportional to 1/kappa^2.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Final, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
import scipy.optimize

from cpmcmc.auxiliary import std_normal_cdf
from cpmcmc.config import ARCT_SEARCH_BRACKET, ARCT_SEARCH_TOL
from cpmcmc.diagnostics import iact
from cpmcmc.errors import InfiniteARCTError, ParameterError
from cpmcmc.models import rw_propose

# stands for IF(h, Q_EX) -> infinity, which selects the limiting formulas
IF_LIMIT: Final = "limit"
ExactInefficiency = Union[float, Literal["limit"]]


def _check_inefficiency(if_ex: ExactInefficiency) -> None:
    if if_ex != IF_LIMIT and not (isinstance(if_ex, (int, float)) and if_ex >= 1):
        raise ParameterError(f"if_ex must be at least 1 or {IF_LIMIT!r}, got {if_ex}")


def rho_u(kappa: float) -> float:
    """Acceptance probability of the penalty method with a perfect proposal"""
    if kappa < 0:
        raise ParameterError(f"kappa must be non-negative, got {kappa}")
    return float(2.0 * std_normal_cdf(-kappa / 2.0))


def rho_pm(sigma: float) -> float:
    """Limiting PM acceptance probability when Var(Z) = sigma^2"""
    if sigma < 0:
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    return float(2.0 * std_normal_cdf(-sigma / math.sqrt(2.0)))


def rif_qstar(kappa: float, if_ex: ExactInefficiency) -> float:
    """IF(h, Q*) / IF(h, Q_EX)"""
    _check_inefficiency(if_ex)
    acceptance = rho_u(kappa)
    if if_ex == IF_LIMIT:
        return 1.0 / acceptance
    assert not isinstance(if_ex, str)
    return ((1.0 + if_ex) / acceptance - 1.0) / if_ex


def arct(kappa: float, if_ex: ExactInefficiency) -> float:
    """sqrt(RIF / (kappa^2 rho_u(kappa)))"""
    if kappa <= 0:
        raise InfiniteARCTError(f"ARCT is infinite at kappa={kappa}")
    return math.sqrt(rif_qstar(kappa, if_ex) / (kappa * kappa * rho_u(kappa)))


def minimize_arct(if_ex: ExactInefficiency) -> float:
    """The kappa minimizing arct, by golden section search"""
    _check_inefficiency(if_ex)
    result = scipy.optimize.minimize_scalar(
        lambda kappa: arct(kappa, if_ex),
        bracket=ARCT_SEARCH_BRACKET,
        method="golden",
        tol=ARCT_SEARCH_TOL,
    )
    return float(result.x)


@dataclasses.dataclass(frozen=True)
class TheoryCurvePoint:
    kappa: float
    rho_u: float
    rif: float
    arct: float
    if_ex: ExactInefficiency


def curve_point(kappa: float, if_ex: ExactInefficiency) -> TheoryCurvePoint:
    return TheoryCurvePoint(
        kappa, rho_u(kappa), rif_qstar(kappa, if_ex), arct(kappa, if_ex), if_ex
    )


def theory_curves(
    kappa_min: float = 0.2, kappa_max: float = 4.0, step: float = 0.01
) -> pd.DataFrame:
    """rho_u, RIF and ARCT on a kappa grid for IF(h, Q_EX) = 1 and the limit"""
    if not 0 < kappa_min <= kappa_max or not step > 0:
        raise ParameterError(
            f"Need 0 < kappa_min <= kappa_max and step > 0, got {kappa_min}, "
            f"{kappa_max}, {step}"
        )
    n = int(round((kappa_max - kappa_min) / step)) + 1
    rows = []
    for kappa in np.round(kappa_min + step * np.arange(n), 10):
        kappa = float(kappa)
        rows.append(
            {
                "kappa": kappa,
                "rho_u": rho_u(kappa),
                "rif_if1": rif_qstar(kappa, 1.0),
                "rif_inf": rif_qstar(kappa, IF_LIMIT),
                "arct_if1": arct(kappa, 1.0),
                "arct_inf": arct(kappa, IF_LIMIT),
            }
        )
    return pd.DataFrame(rows)


def _half_quadratic(cov: np.ndarray, x: np.ndarray) -> float:
    """x^T cov^{-1} x / 2, the negative log Gaussian density up to a constant"""
    return 0.5 * float(x @ np.linalg.solve(cov, x))


def penalty_step(
    theta: np.ndarray,
    kappa: float,
    sigma_bar: np.ndarray,
    proposal_cov: np.ndarray,
    rng: np.random.Generator,
    independent: bool = False,
) -> Tuple[np.ndarray, bool]:
    """
    One step of the penalty method targeting N(0, sigma_bar): the exact log acceptance
    ratio plus fresh w ~ N(-kappa^2/2, kappa^2). The proposal is a random walk with
    covariance proposal_cov, or if independent, a draw from N(0, proposal_cov).
    """
    if kappa < 0:
        raise ParameterError(f"kappa must be non-negative, got {kappa}")
    if independent:
        theta_prop = rw_propose(np.zeros_like(theta), proposal_cov, rng)
        log_q_ratio = _half_quadratic(proposal_cov, theta_prop) - _half_quadratic(
            proposal_cov, theta
        )
    else:
        theta_prop = rw_propose(theta, proposal_cov, rng)
        log_q_ratio = 0.0

    w = rng.normal(-0.5 * kappa * kappa, kappa)
    log_ratio = (
        _half_quadratic(sigma_bar, theta)
        - _half_quadratic(sigma_bar, theta_prop)
        + log_q_ratio
        + w
    )
    if log_ratio >= 0 or math.log(rng.uniform()) < log_ratio:
        return theta_prop, True
    return theta, False


def run_penalty_chain(
    n: int,
    kappa: float,
    sigma_bar: np.ndarray,
    proposal_cov: np.ndarray,
    rng: np.random.Generator,
    initial: Optional[np.ndarray] = None,
    independent: bool = False,
) -> Tuple[np.ndarray, float]:
    """Returns the (n, d) trace of the penalty chain and its acceptance rate"""
    sigma_bar = np.atleast_2d(np.asarray(sigma_bar, dtype=float))
    proposal_cov = np.atleast_2d(np.asarray(proposal_cov, dtype=float))
    d = sigma_bar.shape[0]
    theta = np.zeros(d) if initial is None else np.asarray(initial, dtype=float)
    trace = np.empty((n, d))
    accepted = 0
    for i in range(n):
        theta, moved = penalty_step(
            theta, kappa, sigma_bar, proposal_cov, rng, independent
        )
        accepted += moved
        trace[i] = theta
    return trace, accepted / n


@dataclasses.dataclass(frozen=True)
class IIDGaussianKernel:
    """Exact kernel that draws N(0, 1) independently, IF = 1"""

    inefficiency: float = 1.0

    def __call__(self, x: float, rng: np.random.Generator) -> float:
        return float(rng.standard_normal())


@dataclasses.dataclass(frozen=True)
class AR1Kernel:
    """x' = a x + sqrt(1 - a^2) eps, reversible for N(0, 1), IF = (1 + a)/(1 - a)"""

    a: float

    def __post_init__(self) -> None:
        if not -1.0 < self.a < 1.0:
            raise ParameterError(f"a must lie in (-1, 1), got {self.a}")

    @property
    def inefficiency(self) -> float:
        return (1.0 + self.a) / (1.0 - self.a)

    def __call__(self, x: float, rng: np.random.Generator) -> float:
        return self.a * x + math.sqrt(1.0 - self.a**2) * float(rng.standard_normal())


@dataclasses.dataclass(frozen=True)
class QStarComparison:
    simulated: float
    closed_form: Optional[float]


def qstar_if(
    exact_kernel: Callable[[float, np.random.Generator], float],
    kappa: float,
    n: int,
    rng: np.random.Generator,
    exact_if: Optional[float] = None,
    initial: float = 0.0,
) -> QStarComparison:
    """
    Simulates Q*, which takes a step of exact_kernel with probability rho_u(kappa) and
    stays put otherwise, and estimates the IF of the identity function. If exact_if is
    given, the closed form (1 + IF)/rho_u - 1 is returned alongside.
    """
    acceptance = rho_u(kappa)
    moves = rng.uniform(size=n) < acceptance
    trace = np.empty(n)
    x = initial
    for i in range(n):
        if moves[i]:
            x = exact_kernel(x, rng)
        trace[i] = x
    closed_form = None
    if exact_if is not None:
        closed_form = (1.0 + exact_if) / acceptance - 1.0
    return QStarComparison(iact(trace), closed_form)
