"""Keyed random-stream derivation.

Every stochastic operation in a run draws from its own child stream, derived
from the run seed plus a (item, block, phase) key. Streams are independent of
batch processing order, so identical seeds reproduce identical runs and
remote model adapters can be handed the key instead of generator state.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

_SEED_MASK = (1 << 64) - 1


def _entropy(part: int | str) -> int:
    """Map a key part to a non-negative integer usable as SeedSequence entropy."""
    if isinstance(part, str):
        return int.from_bytes(hashlib.blake2b(part.encode(), digest_size=8).digest(), "big")
    if part < 0:
        raise ValueError(f"negative key part: {part}")
    return part


@dataclass
class RngStream:
    """A named random stream: the key identifies it on the wire, the generator
    serves local draws."""

    key: str
    gen: np.random.Generator = field(repr=False)


def derive_stream(seed: int, item: int, block: int, phase: str, *extra: int | str) -> RngStream:
    """Derive the child stream for (item, block, phase[, extra...]) under `seed`.

    The same tuple always yields the same stream, regardless of how many other
    streams were derived before it.
    """
    key = f"i{item}.b{block}.{phase}" + "".join(f".{e}" for e in extra)
    material = [seed & _SEED_MASK, _entropy(item), _entropy(block), _entropy(phase)]
    material += [_entropy(e) for e in extra]
    return RngStream(key=key, gen=np.random.default_rng(material))
