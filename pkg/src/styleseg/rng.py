"""Seeded random streams.

Every consumer (weight init, data generation, dropout, augmentation, ...)
draws from its own PCG64 generator. A stream is derived from the run seed
and the consumer's name through :class:`numpy.random.SeedSequence`, so
adding a new consumer never perturbs the numbers another consumer sees.
"""

from __future__ import annotations

import zlib

import numpy as np

ALGORITHM = "PCG64 via numpy.random.SeedSequence(seed, spawn_key=crc32(names))"


def _key(parts: tuple) -> tuple[int, ...]:
    out = []
    for part in parts:
        if isinstance(part, (int, np.integer)):
            out.append(int(part) & 0xFFFFFFFF)
        else:
            out.append(zlib.crc32(str(part).encode("utf-8")))
    return tuple(out)


class Rng:
    """A 64-bit seed plus named, independent child streams.

    >>> a = Rng(7).stream("init").normal()
    >>> b = Rng(7).stream("init").normal()
    >>> a == b
    True
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed

    def stream(self, *names) -> np.random.Generator:
        """Return a fresh generator for the consumer identified by ``names``.

        Calling twice with the same names gives two generators that produce
        the same sequence.
        """
        ss = np.random.SeedSequence(self.seed, spawn_key=_key(names))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *names) -> "Rng":
        """Derive a new Rng whose seed is a deterministic function of this one."""
        value = self.stream("child", *names).integers(0, 2**63, dtype=np.int64)
        return Rng(int(value))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"
