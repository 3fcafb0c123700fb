"""Splittable seeding: every consumer derives an independent stream from one master seed.

Streams are identified by integer key paths fed to ``numpy.random.SeedSequence``
via ``spawn_key``, so the same (seed, key) always yields the same generator no
matter how many workers run or in which order trials execute.
"""

from __future__ import annotations

import numpy as np

# Top-level stream namespaces (first element of a key path).
STATICS = 0  # codes, delays, pathloss: fixed per experiment grid point
TRIAL = 1    # per-trial activity, fading, payloads, noise
PROBE = 2    # calibration probes (e.g. GCV tuning frames)


def substream(master_seed: int, *key: int) -> np.random.Generator:
    """Return a generator for the stream identified by ``key`` under ``master_seed``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)
