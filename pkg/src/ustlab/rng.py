"""Counter-based random streams keyed by ``(master_seed, stream_index)``.

Each stream wraps a Philox generator whose key is derived from the pair, so a
stream's output depends only on its identity and on how many draws were taken.
The underlying :class:`numpy.random.Generator` can be passed straight into
numba-compiled kernels.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class RngStream:
    __slots__ = ("master_seed", "stream_index", "generator")

    def __init__(self, master_seed: int, stream_index: int = 0):
        self.master_seed = int(master_seed) & _MASK64
        self.stream_index = int(stream_index) & _MASK64
        ss = np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_index,))
        self.generator = np.random.Generator(np.random.Philox(ss))

    @property
    def identity(self) -> tuple:
        return (self.master_seed, self.stream_index)

    @property
    def draw_counter(self) -> int:
        st = self.generator.bit_generator.state["state"]
        return int(st["counter"][0])

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, stream_index={self.stream_index})"


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")
