"""Reproducible random streams.

Every stochastic draw in the package comes from a named Philox substream
derived from a single root seed, so any draw is reproducible from
(seed, purpose, index...).  Philox is counter-based: independent streams
are cheap and collision-free for distinct spawn keys.

Stream map used by the library (documented contract):

    ("env", episode)        initial-state sampling and all Brownian increments
                            of one training episode, consumed in step order
    ("explore", episode)    epsilon-greedy uniforms / random actions
    ("train", episode)      replay minibatch indices and the P_P / P_B
                            collocation and boundary draws of one episode
    ("mc", batch)           Monte-Carlo rollout noise; one matrix of shape
                            (n_rollouts, noise_dim) is drawn per (sub)step, so
                            rollout i always reads row i regardless of how the
                            batch is executed (sequential or vectorized)
    ("init",)               network weight initialization
"""

from __future__ import annotations

import zlib

import numpy as np

_PURPOSES = {"env": 0, "explore": 1, "train": 2, "mc": 3, "init": 4, "eval": 5}


def _key_part(part) -> int:
    if isinstance(part, str):
        if part in _PURPOSES:
            return _PURPOSES[part]
        # stable hash for ad-hoc purposes; offset past the reserved ids
        return 16 + zlib.crc32(part.encode())
    return int(part)


def substream(seed: int, *key) -> np.random.Generator:
    """Generator for the substream identified by ``key`` under ``seed``.

    Same (seed, key) always yields the same stream; distinct keys are
    statistically independent.
    """
    spawn_key = tuple(_key_part(p) for p in key)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(ss))
