import itertools

import numpy as np
import pytest

from cpmcmc.errors import ParameterError
from cpmcmc.hilbert import (
    LogisticProjection,
    effective_order,
    hilbert_index,
    hilbert_key,
    lexicographic_rank,
    pilot_projection,
)


def test_first_order_curve_in_two_dimensions() -> None:
    cells = np.array([[0, 0], [0, 1], [1, 1], [1, 0]])
    np.testing.assert_array_equal(hilbert_index(cells, 1), [0, 1, 2, 3])


@pytest.mark.parametrize("k, order", [(2, 1), (2, 3), (2, 4), (3, 2), (4, 2)])
def test_curve_visits_every_cell_once_through_neighbours(k: int, order: int) -> None:
    cells = np.array(list(itertools.product(range(1 << order), repeat=k)))
    keys = hilbert_index(cells, order)
    np.testing.assert_array_equal(np.sort(keys), np.arange(cells.shape[0]))

    path = cells[np.argsort(keys)]
    steps = np.abs(np.diff(path.astype(int), axis=0)).sum(axis=1)
    assert np.all(steps == 1)


def test_one_dimension_is_the_identity() -> None:
    cells = np.array([[5], [0], [3]])
    np.testing.assert_array_equal(hilbert_index(cells, 4), [5, 0, 3])


def test_effective_order_fits_in_64_bits() -> None:
    assert effective_order(16, 2) == 16
    assert effective_order(16, 5) == 12
    assert effective_order(31, 1) == 31
    with pytest.raises(ParameterError):
        effective_order(0, 2)
    with pytest.raises(ParameterError):
        hilbert_index(np.zeros((2, 3), dtype=np.uint64), 22)


def test_key_of_a_single_point_matches_the_batch(rng: np.random.Generator) -> None:
    points = rng.standard_normal((10, 3))
    keys = hilbert_key(points)
    assert keys.shape == (10,)
    assert hilbert_key(points[4]) == keys[4]


def test_projection_must_match_dimension(rng: np.random.Generator) -> None:
    with pytest.raises(ParameterError):
        hilbert_key(rng.standard_normal((4, 2)), LogisticProjection.standard(3))
    with pytest.raises(ParameterError):
        LogisticProjection(np.zeros(2), np.array([1.0, 0.0]))


def test_keys_preserve_order_in_one_dimension(rng: np.random.Generator) -> None:
    points = rng.standard_normal((50, 1))
    keys = hilbert_key(points)
    assert np.all(np.diff(keys[np.argsort(points[:, 0])].astype(float)) >= 0)


def test_pilot_projection_uses_median_and_iqr() -> None:
    states = np.column_stack([np.arange(1.0, 102.0), np.full(101, 3.0)])
    projection = pilot_projection(states, iqr_multiple=3.0)
    np.testing.assert_allclose(projection.loc, [51.0, 3.0])
    np.testing.assert_allclose(projection.scale, [150.0, 1.0])
    np.testing.assert_allclose(projection(projection.loc[np.newaxis, :]), [[0.5, 0.5]])


def test_lexicographic_rank_breaks_ties_by_index() -> None:
    points = np.array([[1.0, 0.0], [0.0, 5.0], [0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_array_equal(lexicographic_rank(points), [2, 1, 0, 3])
