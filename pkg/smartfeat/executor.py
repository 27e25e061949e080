"""This module houses the worker pool used for the embarrassingly parallel parts of the pipeline: fitting ensemble
members and running the repetitions of an experiment.

Jobs are python callables run in a :external:class:`concurrent.futures.Executor`. Results are always collected by
index, so the output never depends on the order in which workers finish.
"""
from typing import Callable, List, Optional, Sequence, TypeVar
from concurrent.futures import FIRST_EXCEPTION
from concurrent.futures import Executor as FuturesExecutor
from concurrent.futures import Future, ThreadPoolExecutor, wait
import logging

import psutil

l = logging.getLogger(__name__)

__all__ = ("default_jobs", "make_executor", "run_jobs")

_T = TypeVar("_T")
_R = TypeVar("_R")


def default_jobs() -> int:
    """The number of workers to use when the user doesn't say: one per physical core."""
    return psutil.cpu_count(logical=False) or psutil.cpu_count() or 1


def make_executor(jobs: Optional[int] = None) -> Optional[FuturesExecutor]:
    """Construct a thread pool with ``jobs`` workers, or return None if work should simply run inline.

    numpy releases the GIL inside its heavy kernels, so threads are enough here.
    """
    if jobs is None:
        jobs = default_jobs()
    if jobs < 1:
        raise ValueError(f"jobs must be at least 1, got {jobs}")
    if jobs == 1:
        return None
    return ThreadPoolExecutor(max_workers=jobs, thread_name_prefix="smartfeat")


def run_jobs(
    func: Callable[[_T], _R],
    items: Sequence[_T],
    executor: Optional[FuturesExecutor] = None,
    name: str = "job",
) -> List[_R]:
    """Apply ``func`` to every item, in the executor if one is given, and return the results in item order.

    The first failure cancels everything still pending and is re-raised in the caller.
    """
    if executor is None:
        results = []
        for i, item in enumerate(items):
            l.debug("Running %s %d inline", name, i)
            results.append(func(item))
        return results

    futures: List[Future] = [executor.submit(func, item) for item in items]
    done, pending = wait(futures, return_when=FIRST_EXCEPTION)
    for future in done:
        e = future.exception()
        if e is not None:
            for other in pending:
                other.cancel()
            l.info("%s %d failed", name, futures.index(future), exc_info=e)
            raise e
    return [future.result() for future in futures]
