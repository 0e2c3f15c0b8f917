"""Counter-based random streams.

Every stochastic draw in a run is produced by a Philox generator keyed on
(seed, path), where path identifies the consumer, e.g. (step, CAMERAS) or
(step, view, NOISE). Streams are stateless functions of their key, so a run
resumed from step k replays exactly the draws an uninterrupted run would
have made.
"""

import numpy as np

CAMERAS = 1
SDS = 2
HOLDOUT = 3

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _fnv1a(parts: tuple[int, ...]) -> int:
    h = _FNV_OFFSET
    for p in parts:
        v = p & _MASK64
        for _ in range(8):
            h = ((h ^ (v & 0xFF)) * _FNV_PRIME) & _MASK64
            v >>= 8
    return h


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return a fresh generator for the given (seed, path) key."""
    key = np.array([seed & _MASK64, _fnv1a(path)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
