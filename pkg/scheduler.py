"""
Worker pool for fanning out replicas, trials and parameter points.

Results come back in submission order and every work unit carries its own
seed, so outputs do not depend on how many workers ran them.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, Sequence, TypeVar

from dotenv import load_dotenv

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "CHAOSKIT_THREADS"


def configured_workers() -> int:
    """Worker cap from CHAOSKIT_THREADS (an optional .env is honoured), else the CPU count."""
    load_dotenv(dotenv_path=".env", override=False)
    raw = os.getenv(THREADS_ENV)
    default = os.cpu_count() or 1
    if raw is None or raw.strip() == "":
        return default
    try:
        value = int(raw)
    except ValueError:
        logger.warning(f"{THREADS_ENV}={raw!r} is not an integer, using {default}")
        return default
    if value < 1:
        logger.warning(f"{THREADS_ENV}={value} must be >= 1, using 1")
        return 1
    return value


def chunked(items: Sequence[T], n_chunks: int) -> List[Sequence[T]]:
    """Split into at most n_chunks contiguous, nonempty slices."""
    n_chunks = max(1, min(n_chunks, len(items)))
    size, extra = divmod(len(items), n_chunks)
    chunks = []
    start = 0
    for i in range(n_chunks):
        stop = start + size + (1 if i < extra else 0)
        chunks.append(items[start:stop])
        start = stop
    return chunks


class WorkerPool:
    """Order-preserving parallel map over independent work units."""

    def __init__(self, max_workers: Optional[int] = None):
        cap = configured_workers()
        self.max_workers = cap if max_workers is None else max(1, min(max_workers, cap))

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
        items = list(items)
        workers = min(self.max_workers, len(items))
        if workers <= 1:
            return [fn(item) for item in items]
        logger.debug(f"dispatching {len(items)} work units to {workers} workers")
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(fn, items))


_worker_pool: Optional[WorkerPool] = None


def get_worker_pool() -> WorkerPool:
    """Get or create the shared pool."""
    global _worker_pool
    if _worker_pool is None:
        _worker_pool = WorkerPool()
    return _worker_pool
