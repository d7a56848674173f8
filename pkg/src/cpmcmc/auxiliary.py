"""
The auxiliary variate block U behind every likelihood estimate, and the
Crank-Nicolson kernel that correlates successive blocks.

U is a flat vector of standard normal variates laid out t-major, then particle i,
then coordinate. The particle filter layout appends one resampling variate per step
t in 1:T-1 at the tail.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional, Union

import numpy as np
import scipy.special

from cpmcmc.errors import ParameterError


def std_normal_cdf(u: Union[float, np.ndarray]) -> np.ndarray:
    """Phi, via erfc so that the lower tail keeps full relative precision"""
    return 0.5 * scipy.special.erfc(-np.asarray(u, dtype=float) / math.sqrt(2.0))


@dataclasses.dataclass(frozen=True)
class AuxLayout:
    # number of observations
    T: int
    # particles per observation
    N: int
    # standard normal coordinates per particle
    p: int
    # if True, T-1 resampling variates follow the T*N*p cell variates
    with_resampling: bool = False

    def __post_init__(self) -> None:
        if self.T < 1 or self.N < 1 or self.p < 1:
            raise ParameterError(
                f"Layout dimensions must be positive, got T={self.T}, N={self.N}, "
                f"p={self.p}"
            )

    @classmethod
    def importance_sampling(cls, T: int, N: int, p: int) -> AuxLayout:
        return cls(T, N, p, False)

    @classmethod
    def particle_filter(cls, T: int, N: int, p: int) -> AuxLayout:
        return cls(T, N, p, True)

    @property
    def n_cells(self) -> int:
        return self.T * self.N * self.p

    @property
    def M(self) -> int:
        if self.with_resampling:
            return self.n_cells + self.T - 1
        return self.n_cells

    def index(self, t: int, i: int, coord: int) -> int:
        """Flat index of (t, i, coord), all 1-based"""
        if not (1 <= t <= self.T and 1 <= i <= self.N and 1 <= coord <= self.p):
            raise IndexError(f"({t}, {i}, {coord}) is outside {self}")
        return ((t - 1) * self.N + (i - 1)) * self.p + (coord - 1)

    def resampling_index(self, t: int) -> int:
        """Flat index of the resampling variate used between steps t and t+1"""
        if not self.with_resampling or not (1 <= t <= self.T - 1):
            raise IndexError(f"No resampling variate {t} in {self}")
        return self.n_cells + t - 1

    def cell_view(self, values: np.ndarray) -> np.ndarray:
        return values[: self.n_cells].reshape(self.T, self.N, self.p)

    def resampling_view(self, values: np.ndarray) -> np.ndarray:
        if not self.with_resampling:
            raise ValueError("This layout has no resampling variates")
        return values[self.n_cells :]


@dataclasses.dataclass(frozen=True)
class AuxBlock:
    """
    An immutable block of M auxiliary variates. values is a read-only array so a block
    can be shared freely between chain states and workers.
    """

    layout: AuxLayout
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.shape != (self.layout.M,):
            raise ParameterError(
                f"Expected {self.layout.M} values for {self.layout}, got shape "
                f"{self.values.shape}"
            )
        if self.values.flags.writeable:
            frozen = np.array(self.values, dtype=float)
            frozen.flags.writeable = False
            object.__setattr__(self, "values", frozen)

    @property
    def cells(self) -> np.ndarray:
        """(T, N, p) view of the per-particle variates"""
        return self.layout.cell_view(self.values)

    @property
    def resampling(self) -> np.ndarray:
        """(T-1,) view of the resampling variates"""
        return self.layout.resampling_view(self.values)


@dataclasses.dataclass(frozen=True)
class CorrelationParam:
    rho: float
    # only set when rho was derived from (psi, N, T): delta = psi * N / T
    delta: Optional[float] = None

    def __post_init__(self) -> None:
        if not -1.0 <= self.rho <= 1.0:
            raise ParameterError(f"rho must lie in [-1, 1], got {self.rho}")

    @classmethod
    def direct(cls, rho: float) -> CorrelationParam:
        return cls(rho)

    @classmethod
    def from_scaling(cls, psi: float, N: int, T: int) -> CorrelationParam:
        if psi <= 0 or N < 1 or T < 1:
            raise ParameterError(
                f"psi must be positive and N, T at least 1, got psi={psi}, N={N}, "
                f"T={T}"
            )
        delta = psi * N / T
        return cls(math.exp(-delta), delta)


def sample_fresh(layout: AuxLayout, rng: np.random.Generator) -> AuxBlock:
    """Draws U ~ N(0, I_M), filling cells in layout order from the stream"""
    return AuxBlock(layout, rng.standard_normal(layout.M))


def cn_step(
    u: AuxBlock, correlation: CorrelationParam, rng: np.random.Generator
) -> AuxBlock:
    """U' = rho U + sqrt(1 - rho^2) eps"""
    rho = correlation.rho
    if rho == 1.0:
        return u
    if rho == -1.0:
        return AuxBlock(u.layout, -u.values)
    eps = rng.standard_normal(u.layout.M)
    return AuxBlock(u.layout, rho * u.values + math.sqrt(1.0 - rho * rho) * eps)
