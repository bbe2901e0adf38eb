"""Counter-based, splittable random streams.

A stream is identified by ``(master_seed, label)``. Its Philox key is a hash
of that pair, so deriving streams in any order (or on any thread) yields the
same numbers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_U64 = (1 << 64) - 1


def _key_words(master_seed: int, label: str) -> np.ndarray:
    payload = f"{master_seed & _U64}|{label}".encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return np.frombuffer(digest[:16], dtype="<u8").copy()


@dataclass(frozen=True)
class RngStream:
    master_seed: int
    label: str = "root"
    counter: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.master_seed <= _U64:
            raise ValueError(f"master_seed must fit in u64, got {self.master_seed}")
        if not 0 <= self.counter <= _U64:
            raise ValueError(f"counter must fit in u64, got {self.counter}")

    def child(self, *parts) -> "RngStream":
        """Derive an independent stream by extending the label."""
        suffix = "/".join(str(p) for p in parts)
        return RngStream(self.master_seed, f"{self.label}/{suffix}")

    def generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=_key_words(self.master_seed, self.label))
        if self.counter:
            bitgen = bitgen.advance(self.counter)
        return np.random.Generator(bitgen)

    def at(self, counter: int) -> "RngStream":
        return RngStream(self.master_seed, self.label, counter)


def as_generator(rng) -> np.random.Generator:
    """Accept an RngStream, a Generator, or an integer seed."""
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise TypeError(f"cannot build a generator from {type(rng).__name__}")
