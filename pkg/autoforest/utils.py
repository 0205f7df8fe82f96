"""utils.py.

Module with miscellaneous functions.
"""
import os
import logging
import hashlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar


logger = logging.getLogger("autoforest")


THREADS_ENV_VAR = "AUTOFOREST_THREADS"
"""Environment variable with the worker thread count (0 = all CPUs)."""


T = TypeVar("T")
R = TypeVar("R")


class ForestError(Exception):
    """Base error for everything raised by this package."""


if "md5" in hashlib.algorithms_available:

    def _default_hash_factory(initial_data: bytes):
        return hashlib.md5(initial_data)

else:

    def _default_hash_factory(initial_data: bytes):
        return hashlib.sha256(initial_data)


def calculate_checksum(shape_tag: bytes, content: bytes) -> str:
    """Calculate a hex checksum from a shape tag and the raw content.

    The shape tag keeps two corpora with the same bytes but a different
    (n, d) layout apart.
    """
    hash_obj = _default_hash_factory(shape_tag)
    hash_obj.update(content)
    return hash_obj.hexdigest()


def ceil_div(numerator: int, denominator: int) -> int:
    """Return ceil(numerator / denominator) for non-negative integers."""
    return -(-numerator // denominator)


def get_thread_count(default: int = 1) -> int:
    """Return the worker count configured through the environment.

    NOTE: A value of 0 means "use every CPU"; garbage falls back to the
    default with a warning rather than failing the whole run.
    """
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None or not raw.strip():
        return default
    try:
        value = int(raw)
    except ValueError:
        logger.warning("Ignoring invalid %s=%r", THREADS_ENV_VAR, raw)
        return default
    if value < 0:
        logger.warning("Ignoring negative %s=%d", THREADS_ENV_VAR, value)
        return default
    if value == 0:
        return os.cpu_count() or 1
    return value


def map_in_threads(
    func: Callable[[T], R], items: Iterable[T], workers: Optional[int] = None
) -> List[R]:
    """Apply 'func' to every item, preserving the input order.

    With a single worker this runs inline, which keeps tracebacks simple
    and avoids the pool start-up cost for small jobs.
    """
    items = list(items)
    if workers is None:
        workers = get_thread_count()
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))
