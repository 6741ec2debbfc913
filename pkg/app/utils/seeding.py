import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> int:
    """One splitmix64 output for the given 64-bit state"""
    z = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Split a child seed off `seed` for every key in turn.

    derive_seed(s, 3, 7) is the seed of the 7th child of the 3rd child of s;
    the derivation is pure so batch generation can fan out across workers.
    """
    state = splitmix64(seed & _MASK64)
    for key in keys:
        state = splitmix64((state ^ (key & _MASK64)) & _MASK64)
    return state


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *keys)))
