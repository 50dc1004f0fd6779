"""Deterministic random-stream bookkeeping shared by every stochastic component.

All randomness in the package (weight init, dropout noise, DP noise, shuffles,
member subsampling) is derived from explicit `RngState` values or `mix64`
seeds, never from global RNG state, so runs reproduce bit-for-bit across
processes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch

_MASK63 = (1 << 63) - 1


def mix64(*parts: int | str) -> int:
    """Hash ints/strings into a stable 63-bit seed.

    Uses SHA-256 so the result is identical across interpreter runs and
    worker processes (unlike builtin `hash`, which is salted).
    """
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bool) or not isinstance(part, (int, str)):
            raise TypeError(f"mix64 parts must be int or str, got {type(part).__name__}")
        if isinstance(part, int):
            h.update(b"i" + str(part).encode("ascii") + b";")
        else:
            h.update(b"s" + part.encode("utf-8") + b";")
    return int.from_bytes(h.digest()[:8], "little") & _MASK63


@dataclass
class RngState:
    """A seeded position in a family of reproducible noise streams.

    `next_generator` hands out a fresh torch.Generator derived from
    (seed, position) and advances the position. `clone` freezes the current
    position so the exact same draws can be replayed, and `spawn` carves out
    an independent child stream (consuming one position), which is how two
    networks can be fed the same noise within a single step.
    """

    seed: int
    position: int = 0

    def next_generator(self) -> torch.Generator:
        gen = torch.Generator()
        gen.manual_seed(mix64(self.seed, self.position))
        self.position += 1
        return gen

    def clone(self) -> "RngState":
        return RngState(self.seed, self.position)

    def spawn(self) -> "RngState":
        child = RngState(mix64(self.seed, "spawn", self.position))
        self.position += 1
        return child

    def split(self, key: int | str) -> "RngState":
        """Independent stream for a named subsystem; does not advance this state."""
        return RngState(mix64(self.seed, "split", key))
