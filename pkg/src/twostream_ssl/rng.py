"""Deterministic, splittable random streams.

Every source of randomness in the package draws from a named substream of a
single 64-bit seed. Substreams are derived with numpy's SeedSequence over
PCG64, so a given ``(seed, *keys)`` tuple yields the same stream regardless
of call order, worker count, or platform. String keys are folded to integers
via SHA-256 so identifiers like video ids are usable as keys.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key_words(key: int | str) -> list[int]:
    if isinstance(key, (int, np.integer)) and not isinstance(key, bool):
        return [int(key) & _MASK64]
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return [int.from_bytes(digest[i : i + 8], "little") for i in (0, 8)]
    raise TypeError(f"stream key must be int or str, got {type(key).__name__}")


def substream(seed: int, *keys: int | str) -> np.random.Generator:
    """Independent generator for (seed, *keys); same inputs, same stream."""
    entropy: list[int] = _key_words(seed)
    for key in keys:
        entropy.extend(_key_words(key))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys: int | str) -> int:
    """Collapse (seed, *keys) into a fresh 63-bit seed for nested specs."""
    return int(substream(seed, *keys).integers(0, 1 << 63))
