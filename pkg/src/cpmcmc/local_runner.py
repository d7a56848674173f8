"""Runs independent work items on the current machine using a ProcessPoolExecutor"""

from __future__ import annotations

import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List, Sequence, Tuple, TypeVar

_U = TypeVar("_U")


def _star_call(function_and_args: Tuple[Callable[..., _U], Tuple]) -> _U:
    function, args = function_and_args
    return function(*args)


def local_map(
    function: Callable[..., _U], args: Sequence[Tuple], jobs: int = 1
) -> List[_U]:
    """
    Equivalent to [function(*a) for a in args], with up to jobs worker processes.
    Results are always returned in the order of args, so the worker count never
    changes the output. function and args must be picklable when jobs > 1.
    """
    if jobs < 1:
        raise ValueError(f"jobs must be at least 1, got {jobs}")
    if jobs == 1 or len(args) <= 1:
        return [function(*a) for a in args]

    workers = min(jobs, len(args))
    logging.info(f"Running {len(args)} work items on {workers} processes")
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as executor:
        return list(executor.map(_star_call, [(function, tuple(a)) for a in args]))
