import numpy as np
import pytest

from cpmcmc.config import INITIAL_ITERATION
from cpmcmc.streams import RandomStreams


def test_streams_are_pure_functions_of_iteration() -> None:
    streams = RandomStreams(3)
    first = streams.auxiliary(10).standard_normal(5)
    # drawing from other iterations in between changes nothing
    streams.auxiliary(11).standard_normal(100)
    again = RandomStreams(3).auxiliary(10).standard_normal(5)
    np.testing.assert_array_equal(first, again)


def test_purposes_and_chains_are_disjoint() -> None:
    streams = RandomStreams(3)
    draws = [
        streams.proposal(0).standard_normal(4),
        streams.auxiliary(0).standard_normal(4),
        streams.accept(0).standard_normal(4),
        streams.simulation().standard_normal(4),
        RandomStreams(3, chain_id=1).proposal(0).standard_normal(4),
        streams.replicate(0).proposal(0).standard_normal(4),
    ]
    for i in range(len(draws)):
        for j in range(i + 1, len(draws)):
            assert not np.array_equal(draws[i], draws[j])


def test_initial_is_the_auxiliary_stream_before_iteration_zero() -> None:
    streams = RandomStreams(5)
    np.testing.assert_array_equal(
        streams.initial().standard_normal(3),
        streams.auxiliary(INITIAL_ITERATION).standard_normal(3),
    )


def test_replicates_are_reproducible() -> None:
    assert RandomStreams(9).replicate(4) == RandomStreams(9).replicate(4)
    assert RandomStreams(9).replicate(4) != RandomStreams(9).replicate(5)


@pytest.mark.parametrize("seed, chain_id", [(-1, 0), (0, -2)])
def test_negative_seeds_are_rejected(seed: int, chain_id: int) -> None:
    with pytest.raises(ValueError):
        RandomStreams(seed, chain_id)
