"""Counter-based random number streams.

Every random draw in the package is keyed by (seed, stream, counter), so
generation order never matters: regenerating stream 3 at counter 17 yields
the same values no matter what was drawn before. Streams are backed by
numpy's Philox bit generator, which is itself counter-based and produces
identical output on all platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Named streams keep independent uses of randomness from colliding.
STREAM_PARAMS = 0
STREAM_WORLD = 1
STREAM_BATCH = 2
STREAM_DROPOUT = 3
STREAM_SAMPLER = 4
STREAM_AUGMENT = 5
STREAM_SPLIT = 6


@dataclass
class RngState:
    """A (seed, stream) pair with a monotonically increasing counter."""

    seed: int
    stream: int = 0
    counter: int = 0

    def generator(self) -> np.random.Generator:
        """Return a generator at the current counter and advance it."""
        gen = self.at(self.counter)
        self.counter += 1
        return gen

    def at(self, counter: int) -> np.random.Generator:
        """Order-independent access: a fresh generator for an explicit counter.

        Counters are spaced 2**128 draws apart in the Philox counter space,
        so generators for distinct counters never overlap.
        """
        bit = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64),
                               counter=np.array([0, 0, counter, 0], dtype=np.uint64))
        return np.random.Generator(bit)

    def fork(self, stream: int) -> "RngState":
        """A sibling state on a different stream, counter reset to zero."""
        return RngState(seed=self.seed, stream=stream, counter=0)


@dataclass
class RngBank:
    """Convenience bundle handing out per-purpose streams for one seed."""

    seed: int
    _states: dict = field(default_factory=dict)

    def stream(self, stream_id: int) -> RngState:
        if stream_id not in self._states:
            self._states[stream_id] = RngState(self.seed, stream_id)
        return self._states[stream_id]
