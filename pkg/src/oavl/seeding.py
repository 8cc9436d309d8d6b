"""Deterministic seed derivation: one root seed, explicit named streams.

Every consumer of randomness derives its own stream as
``make_rng(seed, "tag", index, ...)``; there is no global generator, so
runs are reproducible and items can fan out across workers.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def _mix(x: int) -> int:
    # splitmix64 finalizer
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def derive_seed(seed: int, *parts) -> int:
    """Fold the root seed with string/int tags into a 64-bit stream seed."""
    state = _mix(int(seed) & _MASK)
    for part in parts:
        if isinstance(part, str):
            data = part.encode("utf-8")
            for i in range(0, len(data), 8):
                chunk = int.from_bytes(data[i : i + 8], "little")
                state = _mix(state ^ chunk)
        elif isinstance(part, (int, np.integer)):
            state = _mix(state ^ (int(part) & _MASK))
        else:
            raise TypeError(f"seed parts must be str or int, got {type(part)!r}")
    return state


def make_rng(seed: int, *parts) -> np.random.Generator:
    """A fresh PCG64 generator on the stream named by ``parts``."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *parts)))
