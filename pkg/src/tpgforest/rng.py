"""Seed streams.

Every random draw in the package comes from a ``numpy.random.Generator``
built from a 64-bit seed. Child seeds are derived from a parent seed and a
label with ``mix64``, so independent parts of an experiment (initialisation,
per-generation episodes, mutation, evaluation scenarios, sweep points) get
disjoint, reproducible streams:

    child_seed = mix64(parent_seed, label)

``label`` may be an ``int`` or a ``str``; strings are hashed with BLAKE2b so
the mapping is stable across interpreter runs (``hash()`` is salted).
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One round of the SplitMix64 finaliser."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def _label_bits(label: int | str) -> int:
    if isinstance(label, str):
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    return int(label) & MASK64


def mix64(parent_seed: int, label: int | str) -> int:
    """Derive a child seed from ``parent_seed`` and ``label``."""
    return splitmix64(splitmix64(int(parent_seed) & MASK64) ^ _label_bits(label))


def child_seed(parent_seed: int, *labels: int | str) -> int:
    """Apply ``mix64`` once per label, left to right."""
    seed = int(parent_seed) & MASK64
    for label in labels:
        seed = mix64(seed, label)
    return seed


def make_rng(seed: int, *labels: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(child_seed(seed, *labels)))
