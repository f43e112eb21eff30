"""
Seeded, splittable random streams.

Every stream is a Philox counter-based generator keyed by the root seed and an
integer path (purpose tag followed by indices), so a replicate draws the same
numbers no matter which worker runs it or in what order.
"""
import numpy as np

# Purpose tags, the first element of every stream path
FINAL_RESAMPLE = 1
P_RESAMPLE = 2
OUTER_RESAMPLE = 3
INNER_RESAMPLE = 4
REPLICATE = 5
PREDICTION_COHORT = 6
SIMULATION = 7


def stream(seed: int, *path: int) -> np.random.Generator:
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(sequence))


def child_seed(seed: int, *path: int) -> int:
    """Derive a 63-bit integer seed for nested studies from a stream path"""
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    hi, lo = sequence.generate_state(2, dtype=np.uint32)
    return (int(hi) << 31) | (int(lo) >> 1)


def resample_indices(seed: int, n: int, m: int, *path: int) -> np.ndarray:
    """m row indices drawn with replacement from range(n)"""
    return stream(seed, *path).integers(0, n, size=m)
