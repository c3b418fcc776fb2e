"""Counter-based uniform streams: one Philox stream per (master seed, replication, individual).

An individual's uniforms depend only on those three integers, never on how many
other individuals are simulated or in which order, so serial and parallel runs
produce identical draws.
"""

from __future__ import annotations

import numpy as np

_HALF_ULP = 2.0 ** -54
_SCALE = 2.0 ** -53


def replication_key(seed: int, rep: int = 0) -> int:
    """64-bit key word mixing the master seed and replication index."""
    ss = np.random.SeedSequence([int(seed) & (2**63 - 1), int(rep)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def individual_uniforms(seed: int, rep: int, individual: int, width: int) -> np.ndarray:
    """``width`` uniforms in the open interval (0, 1) for one individual."""
    bg = np.random.Philox(key=np.array([replication_key(seed, rep), int(individual)], dtype=np.uint64))
    raw = bg.random_raw(width)
    return (raw >> np.uint64(11)).astype(np.float64) * _SCALE + _HALF_ULP


def uniform_block(seed: int, rep: int, ids, width: int) -> np.ndarray:
    """Matrix of uniforms, one row per individual id."""
    ids = np.asarray(ids, dtype=np.int64)
    out = np.empty((ids.size, width))
    key0 = replication_key(seed, rep)
    for row, ind in enumerate(ids):
        bg = np.random.Philox(key=np.array([key0, int(ind)], dtype=np.uint64))
        out[row] = (bg.random_raw(width) >> np.uint64(11)).astype(np.float64)
    out *= _SCALE
    out += _HALF_ULP
    return out


def derived_seed(seed: int, *path: int) -> int:
    """Independent 63-bit seed for a sub-task (cell, replication, bootstrap)."""
    ss = np.random.SeedSequence([int(seed) & (2**63 - 1), *[int(p) for p in path]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
