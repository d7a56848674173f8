from __future__ import annotations

import dataclasses

import numpy as np

from cpmcmc.config import (
    INITIAL_ITERATION,
    STREAM_ACCEPT,
    STREAM_AUXILIARY,
    STREAM_PROPOSAL,
    STREAM_SIMULATION,
)


@dataclasses.dataclass(frozen=True)
class RandomStreams:
    """
    A family of counter-based random streams for one chain.

    Every (iteration, purpose) pair maps to its own Philox generator keyed by
    SeedSequence(seed, spawn_key=(chain_id, iteration, purpose)), so the draws a step
    consumes are a pure function of (seed, chain_id, iteration). Nothing about how
    many workers evaluate an estimate can change which variates it sees.
    """

    seed: int
    chain_id: int = 0

    def __post_init__(self) -> None:
        if self.seed < 0 or self.chain_id < 0:
            raise ValueError(
                f"seed and chain_id must be non-negative, got {self.seed}, "
                f"{self.chain_id}"
            )

    def generator(self, iteration: int, purpose: int) -> np.random.Generator:
        # SeedSequence spawn keys must be non-negative, INITIAL_ITERATION is -1
        sequence = np.random.SeedSequence(
            self.seed, spawn_key=(self.chain_id, iteration + 1, purpose)
        )
        return np.random.Generator(np.random.Philox(sequence))

    def proposal(self, iteration: int) -> np.random.Generator:
        return self.generator(iteration, STREAM_PROPOSAL)

    def auxiliary(self, iteration: int) -> np.random.Generator:
        return self.generator(iteration, STREAM_AUXILIARY)

    def accept(self, iteration: int) -> np.random.Generator:
        return self.generator(iteration, STREAM_ACCEPT)

    def initial(self) -> np.random.Generator:
        return self.auxiliary(INITIAL_ITERATION)

    def simulation(self) -> np.random.Generator:
        return self.generator(INITIAL_ITERATION, STREAM_SIMULATION)

    def replicate(self, index: int) -> RandomStreams:
        """A disjoint family, e.g. for a parallel chain or a replicate batch"""
        return RandomStreams(
            int(np.random.SeedSequence((self.seed, index)).generate_state(1)[0]),
            self.chain_id,
        )
