import logging
import os
import threading
import zlib
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import ROW_BLOCK_SIZE, THREADS_ENV_VAR

logger = logging.getLogger(__name__)

_executors: dict[int, ThreadPoolExecutor] = {}
_executors_lock = threading.Lock()


def derive_rng(seed: int, key: str) -> np.random.Generator:
    """
    Returns an independent random stream for the consumer named by ``key``.
    Streams depend only on (seed, key), so adding a new consumer never shifts existing ones.
    """
    key_hash = zlib.crc32(key.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key_hash]))


def worker_count(requested: int | None = None) -> int:
    """Resolves the worker pool size: explicit request, then STEINFLOW_THREADS, then cpu count."""
    if requested is None:
        raw = os.environ.get(THREADS_ENV_VAR, "0").strip() or "0"
        try:
            requested = int(raw)
        except ValueError:
            logger.warning("Ignoring non-integer %s=%r", THREADS_ENV_VAR, raw)
            requested = 0
    if requested <= 0:
        return os.cpu_count() or 1
    return requested


def shared_executor(n_workers: int) -> ThreadPoolExecutor:
    """One long-lived pool per worker count, reused by every parallel_rows call."""
    with _executors_lock:
        executor = _executors.get(n_workers)
        if executor is None:
            executor = ThreadPoolExecutor(max_workers=n_workers, thread_name_prefix="steinflow")
            _executors[n_workers] = executor
            logger.debug("Started a pool of %d worker thread(s)", n_workers)
        return executor


def parallel_rows(fn: Callable[[int, int], np.ndarray], n_rows: int,
                  workers: int | None = None, block: int = ROW_BLOCK_SIZE) -> np.ndarray:
    """
    Evaluates ``fn(start, stop)`` over fixed-size row blocks and stacks the results in row order.
    The block size does not depend on the worker count, so the arithmetic (and the result)
    is identical for any number of workers.
    ``fn`` runs on the shared pool and must not call parallel_rows itself.
    """
    bounds = [(start, min(start + block, n_rows)) for start in range(0, n_rows, block)]
    n_workers = worker_count(workers)
    if n_workers == 1 or len(bounds) <= 1:
        parts = [fn(start, stop) for start, stop in bounds]
    else:
        parts = list(shared_executor(n_workers).map(lambda b: fn(*b), bounds))
    return np.concatenate(parts, axis=0)


def canonical_order(positions: np.ndarray) -> np.ndarray:
    """Lexicographic ordering of particle rows; identical for any permutation of the rows."""
    positions = np.asarray(positions)
    return np.lexsort(positions.T[::-1])
