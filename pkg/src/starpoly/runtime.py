"""Process-level runtime knobs.

LSP_THREADS caps internal parallelism (0 or unset means automatic). Table
construction partitions work by pixel and is bit-identical at any thread
count, so the cap only trades wall time.
"""

import os


def thread_cap() -> int:
    """Configured thread cap; 0 means automatic."""
    raw = os.environ.get("LSP_THREADS", "0").strip()
    try:
        value = int(raw)
    except ValueError as exc:
        raise ValueError(f"LSP_THREADS must be an integer, got {raw!r}") from exc
    if value < 0:
        raise ValueError(f"LSP_THREADS must be >= 0, got {value}")
    return value


def apply_thread_cap() -> int:
    """Clamp numba's thread pool to the configured cap; returns the cap used."""
    import numba

    cap = thread_cap()
    limit = numba.config.NUMBA_NUM_THREADS
    threads = limit if cap == 0 else min(cap, limit)
    numba.set_num_threads(max(1, threads))
    return threads
