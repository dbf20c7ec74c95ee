"""Reproducible random streams.

Every random draw in the toolkit comes from a Philox (counter-based) generator
keyed by ``(seed, replica, tag, *extra)``.  Streams for different tags are
statistically independent, so the slow noise ``B``, the fast noise ``W`` and the
fluctuation noise ``V`` never share bits, and a replica's output does not
depend on which worker computed it or in which order.
"""

from __future__ import annotations

import numpy as np

TAGS = {
    "rho": 1,
    "xi": 2,
    "B": 3,
    "W": 4,
    "V": 5,
    "frozen": 6,
    "probe": 7,
    "psi": 8,
    "psi_outer": 9,
    "mixing": 10,
    "subsample": 11,
}


def stream(seed: int, replica: int, tag: str, *extra: int) -> np.random.Generator:
    if tag not in TAGS:
        raise KeyError(f"unknown stream tag {tag!r}")
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(replica), TAGS[tag], *map(int, extra)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


class ReplicaStreams:
    """Lazily created per-tag generators for one replica."""

    def __init__(self, seed: int, replica: int = 0):
        self.seed = int(seed)
        self.replica = int(replica)
        self._cache: dict[str, np.random.Generator] = {}

    def __getattr__(self, tag):
        if tag.startswith("_"):
            raise AttributeError(tag)
        return self.get(tag)

    def get(self, tag: str) -> np.random.Generator:
        if tag not in self._cache:
            self._cache[tag] = stream(self.seed, self.replica, tag)
        return self._cache[tag]
