"""Deterministic chunked thread parallelism.

Work is split into fixed-size chunks whose boundaries depend only on the
total size, never on the worker count; each chunk writes to a disjoint
slice of preallocated output.  Results are therefore byte-identical whether
run serially or on any number of threads.  Worker count comes from the
SEMSURF_THREADS environment variable (default: all CPUs).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

_ENV_VAR = "SEMSURF_THREADS"


def thread_count() -> int:
    raw = os.environ.get(_ENV_VAR)
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{_ENV_VAR} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValueError(f"{_ENV_VAR} must be >= 1, got {n}")
    return n


def run_chunked(total: int, chunk: int, work: Callable[[int, int], None]) -> None:
    """Invoke work(start, stop) over fixed [start, stop) chunks, maybe threaded.

    ``work`` must only write to slices owned by its chunk.  Chunk boundaries
    are a pure function of (total, chunk), so schedules cannot influence
    output placement.
    """
    if total <= 0:
        return
    spans = [(s, min(s + chunk, total)) for s in range(0, total, chunk)]
    workers = thread_count()
    if workers == 1 or len(spans) == 1:
        for start, stop in spans:
            work(start, stop)
        return
    with ThreadPoolExecutor(max_workers=min(workers, len(spans))) as pool:
        futures = [pool.submit(work, start, stop) for start, stop in spans]
        for fut in futures:
            fut.result()
