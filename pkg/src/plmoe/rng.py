"""Seedable counter-based random number generation.

Every stochastic operation in the package takes an explicit generator built
here, so that any run is reproducible from (seed, stream names) alone.
Philox is counter-based: generators for distinct keys are independent and
creating one is cheap, which lets us key a fresh generator off (seed, step)
inside the training loop instead of serializing generator state.
"""

from __future__ import annotations

import hashlib

import numpy as np


def make_rng(seed: int, *streams: int | str) -> np.random.Generator:
    """Build a Philox generator keyed by a seed plus named/numbered streams."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for s in streams:
        h.update(b"/")
        h.update(str(s).encode())
    key = int.from_bytes(h.digest()[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))
