"""Deterministic seed splitting.

Every run has one root seed. Stages and individual forward calls get
child seeds derived from ``(root, key, key, ...)`` through
:class:`numpy.random.SeedSequence`, so rerunning a single stage with the
same root reproduces it regardless of what ran before.
"""

import zlib

import numpy as np


def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("seed keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def child_seed(root, *keys):
    """Return a 63-bit integer seed for the stage identified by ``keys``."""
    ss = np.random.SeedSequence(
        entropy=int(root), spawn_key=tuple(_key_to_int(k) for k in keys)
    )
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def child_rng(root, *keys):
    return np.random.default_rng(child_seed(root, *keys))
