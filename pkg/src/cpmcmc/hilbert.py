"""
Hilbert curve keys for sorting multivariate particles.

Points are mapped into the unit cube coordinatewise by a logistic transform,
quantized onto a 2^order grid per axis, and ranked along the Hilbert curve using
Skilling's transpose formulation, vectorized over points.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np
import scipy.special

from cpmcmc.config import (
    DEFAULT_HILBERT_ORDER,
    HILBERT_KEY_BITS,
    LOGISTIC_IQR_MULTIPLE,
    MAX_HILBERT_ORDER,
)
from cpmcmc.errors import ParameterError


@dataclasses.dataclass(frozen=True)
class LogisticProjection:
    """x -> 1 / (1 + exp(-(x - loc) / scale)) coordinatewise"""

    loc: np.ndarray
    scale: np.ndarray

    def __post_init__(self) -> None:
        loc = np.atleast_1d(np.asarray(self.loc, dtype=float))
        scale = np.atleast_1d(np.asarray(self.scale, dtype=float))
        if loc.shape != scale.shape or loc.ndim != 1:
            raise ParameterError(
                f"loc and scale must be vectors of equal length, got {loc.shape} and "
                f"{scale.shape}"
            )
        if not np.all(scale > 0):
            raise ParameterError(f"scale must be positive, got {scale}")
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "scale", scale)

    @classmethod
    def standard(cls, k: int) -> LogisticProjection:
        return cls(np.zeros(k), np.ones(k))

    @property
    def k(self) -> int:
        return self.loc.shape[0]

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return scipy.special.expit((points - self.loc) / self.scale)


def pilot_projection(
    states: np.ndarray, iqr_multiple: float = LOGISTIC_IQR_MULTIPLE
) -> LogisticProjection:
    """
    Centers each axis at the median of a pilot state path and scales it by a multiple
    of the interquartile range
    """
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, np.newaxis]
    q25, median, q75 = np.percentile(states, [25.0, 50.0, 75.0], axis=0)
    iqr = q75 - q25
    # a constant axis would give a zero scale
    scale = np.where(iqr > 0, iqr_multiple * iqr, 1.0)
    return LogisticProjection(median, scale)


def effective_order(order: int, k: int) -> int:
    """Bits per axis, reduced so that order * k fits in one 64-bit key"""
    if not 1 <= order <= MAX_HILBERT_ORDER:
        raise ParameterError(
            f"order must lie in [1, {MAX_HILBERT_ORDER}], got {order}"
        )
    return min(order, HILBERT_KEY_BITS // k)


def hilbert_index(coords: np.ndarray, order: int) -> np.ndarray:
    """
    Position along the order-`order` Hilbert curve of integer grid cells.

    coords has shape (N, k) with entries in [0, 2^order). For k=1 the curve is the
    identity ordering. For k=2, order 1 the cells (0,0), (0,1), (1,1), (1,0) get
    indices 0, 1, 2, 3, with the first coordinate horizontal.
    """
    coords = np.asarray(coords)
    if coords.ndim != 2:
        raise ParameterError(f"coords must have shape (N, k), got {coords.shape}")
    n_points, k = coords.shape
    if order * k > HILBERT_KEY_BITS:
        raise ParameterError(f"order {order} with k={k} does not fit in a 64-bit key")
    x = coords.T.astype(np.uint64)
    if k == 1:
        return x[0]

    # Skilling's AxestoTranspose, applied to all points at once. Bit masks are kept
    # as numpy uint64 scalars so no operation promotes to float.
    zero = np.uint64(0)
    one = np.uint64(1)
    for bit in range(order - 1, 0, -1):
        q = np.uint64(1 << bit)
        p = np.uint64((1 << bit) - 1)
        for i in range(k):
            has_bit = (x[i] & q) != zero
            x[0] = np.where(has_bit, x[0] ^ p, x[0])
            swap = np.where(has_bit, zero, (x[0] ^ x[i]) & p)
            x[0] ^= swap
            x[i] ^= swap

    # Gray encode
    for i in range(1, k):
        x[i] ^= x[i - 1]
    flip = np.zeros(n_points, dtype=np.uint64)
    for bit in range(order - 1, 0, -1):
        q = np.uint64(1 << bit)
        flip = np.where((x[k - 1] & q) != zero, flip ^ np.uint64((1 << bit) - 1), flip)
    x ^= flip

    # interleave the transposed bits, most significant first
    key = np.zeros(n_points, dtype=np.uint64)
    for bit in range(order - 1, -1, -1):
        shift = np.uint64(bit)
        for i in range(k):
            key = (key << one) | ((x[i] >> shift) & one)
    return key


def quantize(unit_points: np.ndarray, order: int) -> np.ndarray:
    """Maps points of [0, 1]^k onto the 2^order grid"""
    cells = 1 << order
    coords = np.floor(unit_points * cells)
    return np.clip(coords, 0, cells - 1).astype(np.uint64)


def hilbert_key(
    points: np.ndarray,
    projection: Optional[LogisticProjection] = None,
    order: int = DEFAULT_HILBERT_ORDER,
) -> np.ndarray:
    """
    Keys h(kappa(x)) for points of shape (N, k), or a single point of shape (k,).
    Sorting by key (stably, so ties keep their original order) sorts the points along
    the Hilbert curve.
    """
    points = np.asarray(points, dtype=float)
    single = points.ndim == 1
    if single:
        points = points[np.newaxis, :]
    k = points.shape[1]
    if projection is None:
        projection = LogisticProjection.standard(k)
    elif projection.k != k:
        raise ParameterError(f"Projection is for k={projection.k}, points have k={k}")
    order = effective_order(order, k)
    keys = hilbert_index(quantize(projection(points), order), order)
    return keys[0] if single else keys


def lexicographic_rank(points: np.ndarray) -> np.ndarray:
    """
    Ranks usable as sort keys that order points by their first coordinate, then the
    second, and so on, ties broken by original index
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, np.newaxis]
    # lexsort's primary key is the last one given
    keys = tuple(points[:, j] for j in range(points.shape[1] - 1, -1, -1))
    order = np.lexsort((np.arange(points.shape[0]),) + keys)
    ranks = np.empty_like(order)
    ranks[order] = np.arange(order.shape[0])
    return ranks
