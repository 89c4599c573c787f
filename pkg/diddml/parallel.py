import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """
    Apply ``fn`` to every item, in a process pool when ``threads > 1``.

    Results come back in input order, so the output does not depend on how the
    pool schedules the work. ``fn`` must be a module-level function.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    workers = min(threads, len(items))
    logger.debug("dispatching %d tasks to %d worker processes", len(items), workers)
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, items))


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 63-bit seed for a sub-task, a pure function of (seed, keys)."""
    state = np.random.SeedSequence([int(seed), *[int(k) for k in keys]]).generate_state(1, dtype=np.uint64)
    return int(state[0] >> np.uint64(1))
