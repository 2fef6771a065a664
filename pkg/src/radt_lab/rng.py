"""Seed derivation.

Every random stream is a PCG64 generator seeded by a ``SeedSequence`` whose
entropy is the root seed and whose spawn key is a tuple of integers naming the
stream. String labels are hashed (FNV-1a, 32 bits) so that keys are stable
across processes and platforms. Two streams share state only if their full
key paths are equal.
"""

from __future__ import annotations

import numpy as np

GENERATOR_NAME = "pcg64-seedsequence-v1"


def _label(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("seed components must be non-negative")
        return int(part)
    if isinstance(part, str):
        h = 0x811C9DC5
        for byte in part.encode("utf-8"):
            h = ((h ^ byte) * 0x01000193) & 0xFFFFFFFF
        return h
    raise TypeError(f"unsupported seed component {part!r}")


def seed_sequence(*key) -> np.random.SeedSequence:
    if not key:
        raise ValueError("empty seed key")
    parts = [_label(p) for p in key]
    return np.random.SeedSequence(entropy=parts[0], spawn_key=tuple(parts[1:]))


def make_rng(*key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(*key)))


def derive_seed(*key) -> int:
    """A 63-bit integer seed for the stream named by ``key``."""
    state = seed_sequence(*key).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)
