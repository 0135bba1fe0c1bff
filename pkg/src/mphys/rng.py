"""Seed derivation: splitmix64 streams feeding numpy generators.

All randomness in the package flows from one user seed through
`derive_seed(seed, label)`, so adding a consumer never perturbs the
streams of existing ones.
"""

import hashlib

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def derive_seed(seed: int, label: str) -> int:
    """Stable 64-bit stream seed for (seed, label)."""
    digest = hashlib.sha256(label.encode()).digest()
    state = (seed ^ int.from_bytes(digest[:8], "little")) & _MASK
    _, out = splitmix64(state)
    return out


def generator(seed: int, label: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, label)))
