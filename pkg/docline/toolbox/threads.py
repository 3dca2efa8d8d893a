import concurrent.futures
import logging
import os
import typing as t

from dotenv import load_dotenv

THREADS_ENV = "DOCLINE_THREADS"

T = t.TypeVar("T")
R = t.TypeVar("R")


def default_thread_count() -> int:
    """Worker threads for generation and evaluation; `DOCLINE_THREADS` (env or .env) overrides."""
    load_dotenv()
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            count = int(raw)
            if count >= 1:
                return count
        except ValueError:
            pass
        logging.warning(f"Ignoring {THREADS_ENV}={raw!r}; expected a positive integer")
    return min(8, os.cpu_count() or 1)


def map_in_threads(fn: t.Callable[[T], R], items: t.Sequence[T], threads: t.Optional[int] = None) -> list[R]:
    """Apply `fn` to every item on a thread pool; results keep the input order.

    The first exception raised by a worker is re-raised after the pool drains.
    """
    threads = threads or default_thread_count()
    if threads == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    results: list[t.Optional[R]] = [None] * len(items)
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
        future_to_slot = {executor.submit(fn, item): slot for slot, item in enumerate(items)}
        for future in concurrent.futures.as_completed(future_to_slot):
            results[future_to_slot[future]] = future.result()
    return t.cast(list[R], results)
