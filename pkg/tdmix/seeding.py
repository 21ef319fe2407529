"""Counter-based derivation of per-purpose seeds from one base seed.

A derived seed depends only on (base_seed, purpose, index), never on how many
workers run or in which order, so every artifact is reproducible from the
base seed alone.
"""

from typing import List

import numpy as np

PURPOSE_CODES = {
    "trajectory": 1,
    "train": 2,
    "init": 3,
    "coupling": 4,
    "blocks": 5,
    "concentration": 6,
    "bootstrap": 7,
    "landmarks": 8,
    "reference": 9,
}


def derive_seed(base_seed: int, purpose: str, index: int = 0) -> int:
    """Return the 64-bit seed of stream `index` for `purpose`."""
    if purpose not in PURPOSE_CODES:
        raise KeyError(f"unknown seed purpose: {purpose}")
    sequence = np.random.SeedSequence(
        entropy=int(base_seed), spawn_key=(PURPOSE_CODES[purpose], int(index))
    )
    low, high = sequence.generate_state(2, dtype=np.uint32)
    return (int(high) << 32) | int(low)


def derive_seeds(base_seed: int, purpose: str, count: int) -> List[int]:
    return [derive_seed(base_seed, purpose, index) for index in range(count)]


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))
