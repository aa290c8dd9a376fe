"""Reproducible random-number streams.

A stream is identified by (seed, stream_id, key). Substreams extend the key
tuple, so every update block of every chain iteration can own an independent,
deterministically derived generator. Draws depend only on the identifying
tuple and the call sequence, never on scheduling, which is what makes
checkpoint/resume byte-identical with an uninterrupted run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class RngStream:
    """Identifier for a reproducible random stream.

    Identical (seed, stream_id, key, call sequence) always yields identical
    draws. Concurrent units must each own their own substream; a single
    generator must never be shared between concurrent callers.
    """

    seed: int
    stream_id: int = 0
    key: tuple[int, ...] = field(default_factory=tuple)

    def substream(self, *key: int) -> "RngStream":
        """Derive a child stream by extending the key tuple."""
        return RngStream(self.seed, self.stream_id, self.key + tuple(int(k) for k in key))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,) + self.key)
        return np.random.default_rng(ss)


def as_stream(rng: "RngStream | int") -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    return RngStream(int(rng))
