"""
Named random sub-streams.

All randomness in a run derives from one integer seed. Each consumer asks
for a stream by name (``"split"``, ``"init"``, ``"dropout"``, ``"sampling"``)
plus integer keys such as the fold index, so stages stay reproducible
independently of each other and of execution order.
"""

import zlib

import numpy as np

from .milforge_errors import ParameterError

SEED_LIMIT = 2 ** 64

SPLIT = "split"
INIT = "init"
DROPOUT = "dropout"
SAMPLING = "sampling"


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def check_seed(seed: int) -> int:
    """Run seeds are stored as uint64; anything outside [0, 2**64) is refused"""
    if isinstance(seed, bool) or int(seed) != seed or not 0 <= int(seed) < SEED_LIMIT:
        raise ParameterError(f"seed must be an integer in [0, 2**64), got {seed!r}")
    return int(seed)


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """
    Build an independent generator for ``(seed, name, *keys)``

    Args:
        seed: run seed in [0, 2**64)
        name: stream name
        *keys: extra non-negative integers (fold index, variant index, ...)

    Returns:
        Seeded numpy Generator; identical arguments give identical draws
    """
    entropy = [check_seed(seed), _name_key(name)]
    entropy.extend(int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy))
