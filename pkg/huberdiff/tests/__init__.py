from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, List

import numpy as np
import numpy.typing as npt

from huberdiff.hooks import Hookable


# Ignore the decorator because Mypy falsely flags it as a type violation (https://github.com/python/mypy/issues/11373).
@contextmanager  # type: ignore[misc]
def assert_hook_fired(hookable: Hookable, expected_call_count: int = 1) -> Iterator[None]:
    calls: List[None] = []

    def hook() -> None:
        calls.append(None)
    hookable.hooks.add(hook)
    try:
        yield None
    finally:
        hookable.hooks.remove(hook)
    if len(calls) != expected_call_count:
        raise AssertionError(f'Failed asserting that the hooks of {hookable} fired exactly {expected_call_count} time(s). Instead, they fired {len(calls)} time(s).')


def central_difference(f: Callable[[npt.NDArray[np.float64]], float], x: npt.ArrayLike, h: float = 1e-6) -> npt.NDArray[np.float64]:
    """
    Approximate the gradient of a scalar function of an array with central differences, one entry at a time.
    """
    x = np.array(x, dtype=np.float64)
    gradient = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        original = x[index]
        x[index] = original + h
        plus = f(x.copy())
        x[index] = original - h
        minus = f(x.copy())
        x[index] = original
        gradient[index] = (plus - minus) / (2.0 * h)
    return gradient


def assert_relative_close(expected: npt.ArrayLike, actual: npt.ArrayLike, tolerance: float, floor: float = 1e-12) -> None:
    expected = np.asarray(expected, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if expected.shape != actual.shape:
        raise AssertionError(f'Failed asserting that an array of shape {actual.shape} matches the expected shape {expected.shape}.')
    scale = np.maximum(np.maximum(np.abs(expected), np.abs(actual)), floor)
    errors = np.abs(expected - actual) / scale
    if np.any(errors > tolerance):
        worst = np.unravel_index(np.argmax(errors), errors.shape) if errors.ndim else ()
        raise AssertionError(f'Failed asserting that {actual} is within a relative error of {tolerance} of {expected}. The largest error is {errors[worst]} at {worst}.')
