"""Counter-based random substreams.

A stream is identified by ``(seed, *path)``; the same identifier always yields
the same Philox generator, so work can be split across any number of workers
without changing the numbers drawn.
"""

import os

import numpy as np

CHUNK = 4096


def substream(seed: int, *path: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def worker_count(default: int | None = None) -> int:
    cap = os.environ.get("FORESEE_THREADS")
    n = default or os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def chunk_slices(num: int, chunk: int = CHUNK):
    return [slice(i, min(i + chunk, num)) for i in range(0, num, chunk)]


def derive_seed(seed: int, *path: int) -> int:
    """A 63-bit integer seed for the stream (seed, *path), for APIs that take a plain seed."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))
