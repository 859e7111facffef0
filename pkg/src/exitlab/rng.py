"""Counter-based random number streams.

Each Monte Carlo path owns a Philox stream keyed by
``(master seed, path index)``.  Philox is counter-based, so streams for
different paths never overlap and the set of draws a path sees does not
depend on how paths are grouped into blocks, worker threads, or backend
kernels.  That is what makes batch results independent of worker count
and bit-reproducible.

Seeds are 128-bit: the master seed occupies the high 64 bits of the
Philox key and the path index the low 64 bits.
"""

from __future__ import annotations

import secrets

import numpy as np

MASK64 = (1 << 64) - 1
MASK128 = (1 << 128) - 1


def normalize_seed(seed: int | None) -> int:
    """Coerce ``seed`` to a nonnegative 128-bit integer.

    ``None`` draws a fresh random seed.  Only the low 64 bits take part in
    per-path key derivation; the high bits are folded in so that distinct
    wide seeds still give distinct streams.
    """
    if seed is None:
        return secrets.randbits(64)
    if not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an int, got {type(seed).__name__}")
    seed = int(seed) & MASK128
    # fold high bits down so two seeds differing only above bit 64 diverge
    return (seed & MASK64) ^ (seed >> 64)


def path_key(master_seed: int, path_index: int) -> int:
    """128-bit Philox key for one path."""
    if path_index < 0:
        raise ValueError("path_index must be nonnegative")
    return ((normalize_seed(master_seed) & MASK64) << 64) | (path_index & MASK64)


def path_generator(master_seed: int, path_index: int) -> np.random.Generator:
    """The Generator owning path ``path_index`` under ``master_seed``."""
    return np.random.Generator(np.random.Philox(key=path_key(master_seed, path_index)))


def single_generator(seed: int | None) -> np.random.Generator:
    """A standalone stream for non-path uses (law sampling, restarts)."""
    return path_generator(normalize_seed(seed), 0)
