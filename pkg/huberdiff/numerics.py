"""
Dense array helpers and the seeded random number generator everything else builds on.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

try:
    from typing_extensions import Self, TypeAlias
except ImportError:  # pragma: no cover
    from typing import Self, TypeAlias  # type: ignore  # pragma: no cover


Vector: TypeAlias = npt.NDArray[np.float64]
Matrix: TypeAlias = npt.NDArray[np.float64]
ArrayLike: TypeAlias = Union[npt.ArrayLike, Sequence[float]]

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def assert_finite(array: npt.NDArray[np.float64], what: str = 'array') -> npt.NDArray[np.float64]:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f'The {what} contains non-finite entries: {array}.')
    return array


def as_vector(values: ArrayLike) -> Vector:
    vector = np.asarray(values, dtype=DTYPE)
    if vector.ndim == 0:
        vector = vector.reshape(1)
    if vector.ndim != 1:
        raise ShapeError(f'Expected a vector, but got an array of shape {vector.shape}.')
    return vector


def as_matrix(values: ArrayLike) -> Matrix:
    """
    Convert a nested sequence or an array to a matrix, promoting a single vector to a one-row matrix.
    """
    matrix = np.asarray(values, dtype=DTYPE)
    if matrix.ndim == 1:
        matrix = matrix.reshape(1, -1)
    if matrix.ndim != 2:
        raise ShapeError(f'Expected a matrix, but got an array of shape {matrix.shape}.')
    return matrix


def assert_same_shape(a: npt.NDArray[np.float64], b: npt.NDArray[np.float64]) -> None:
    if a.shape != b.shape:
        raise ShapeError(f'Shapes {a.shape} and {b.shape} do not match.')


def gemv(a: ArrayLike, x: ArrayLike) -> Vector:
    a = as_matrix(a)
    x = as_vector(x)
    if a.shape[1] != x.shape[0]:
        raise ShapeError(f'Cannot multiply a {a.shape} matrix with a vector of length {x.shape[0]}.')
    return assert_finite(a @ x, 'matrix-vector product')


def axpy(alpha: float, x: ArrayLike, y: ArrayLike) -> Vector:
    x = as_vector(x)
    y = as_vector(y)
    assert_same_shape(x, y)
    return assert_finite(alpha * x + y, 'axpy result')


_ELEMENTWISE: Mapping[str, Callable[[Vector, Vector], Vector]] = {
    'add': np.add,
    'subtract': np.subtract,
    'multiply': np.multiply,
    'divide': np.divide,
    'maximum': np.maximum,
    'minimum': np.minimum,
}


def elementwise(op: str | Callable[[Vector, Vector], Vector], a: ArrayLike, b: ArrayLike) -> Vector:
    if isinstance(op, str):
        try:
            op = _ELEMENTWISE[op]
        except KeyError:
            raise ValueError(f'Unknown elementwise operation "{op}". Choose one of {", ".join(_ELEMENTWISE)}.') from None
    a = as_vector(a)
    b = as_vector(b)
    assert_same_shape(a, b)
    with np.errstate(divide='ignore', invalid='ignore', over='ignore'):
        result = np.asarray(op(a, b), dtype=DTYPE)
    return assert_finite(result, 'elementwise result')


class Rng:
    """
    A counter-based random number generator.

    Streams are keyed by a seed and a stream path, so that a run can hand out independent generators for its data,
    initialization, training and sampling, and so that grid cells never share state.
    """

    def __init__(self, seed: int, stream: Tuple[int, ...] = ()):
        if seed < 0 or seed >= 2 ** 64:
            raise ValueError(f'Seeds must be unsigned 64-bit integers, but got {seed}.')
        self._seed = seed
        self._stream = tuple(stream)
        seed_sequence = np.random.SeedSequence(seed, spawn_key=self._stream)
        self._generator = np.random.Generator(np.random.Philox(seed_sequence))

    def __repr__(self) -> str:
        return f'<{self.__class__.__module__}.{self.__class__.__qualname__} seed={self._seed} stream={self._stream}>'

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def stream(self) -> Tuple[int, ...]:
        return self._stream

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def split(self, *index: int) -> Self:
        """
        Derive an independent generator for a sub-stream. Splitting never advances this generator.
        """
        return type(self)(self._seed, self._stream + tuple(index))

    def normal(self, shape: int | Tuple[int, ...]) -> npt.NDArray[np.float64]:
        return self._generator.standard_normal(shape, dtype=DTYPE)

    def uniform(self, low: float, high: float, size: int | Tuple[int, ...]) -> npt.NDArray[np.float64]:
        return self._generator.uniform(low, high, size)

    def integers(self, high: int, size: int) -> npt.NDArray[np.int64]:
        return self._generator.integers(0, high, size=size)

    def choice(self, n: int, size: int, p: npt.ArrayLike) -> npt.NDArray[np.int64]:
        return self._generator.choice(n, size=size, p=p)

    def permutation(self, n: int) -> npt.NDArray[np.int64]:
        return self._generator.permutation(n)


def randn(rng: Rng, n: int) -> Vector:
    if n < 1:
        raise ValueError(f'Cannot draw {n} samples. Draw at least one.')
    return rng.normal(n)
