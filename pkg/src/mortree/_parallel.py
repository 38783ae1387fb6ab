"""Thread-pool sweeps over fixed-size row chunks.

Chunk boundaries never depend on the thread count, so results are bitwise
identical whether one or many threads run the sweep.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

THREADS_ENV = "MORTREE_NUM_THREADS"


def num_threads() -> int:
    value = os.environ.get(THREADS_ENV, "").strip()
    if value:
        return max(1, int(value))
    return os.cpu_count() or 1


def chunked_map(fn, rows: np.ndarray, chunk: int) -> np.ndarray:
    """Apply ``fn`` to consecutive row blocks and concatenate the 1-D results in order."""
    rows = np.asarray(rows)
    if len(rows) == 0:
        return np.zeros(0)
    blocks = [rows[i : i + chunk] for i in range(0, len(rows), chunk)]
    threads = min(num_threads(), len(blocks))
    if threads <= 1:
        parts = [fn(b) for b in blocks]
    else:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(fn, blocks))
    return np.concatenate(parts)
