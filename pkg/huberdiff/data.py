"""
Synthetic point-cloud distributions and the corruption protocol.

Corruption replaces a share of the clean training points with draws from an outlier distribution whose support is
disjoint from the clean one, so it is always known which points are poison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
import pandas as pd

from huberdiff.numerics import Matrix, Vector, Rng, as_matrix


@dataclass(frozen=True)
class MixtureComponent:
    weight: float
    mean: Tuple[float, ...]
    # Diagonal of the covariance matrix.
    variance: Tuple[float, ...]

    def __post_init__(self) -> None:
        if self.weight < 0:
            raise ValueError(f'Component weights must be nonnegative, but got {self.weight}.')
        if len(self.mean) != len(self.variance):
            raise ValueError(f'A component mean {self.mean} and its variance {self.variance} must have the same dimension.')
        if any(variance <= 0 for variance in self.variance):
            raise ValueError(f'Component variances must be positive, but got {self.variance}.')


@dataclass(frozen=True)
class MixtureSpec:
    """
    A Gaussian mixture with diagonal covariances.
    """

    components: Tuple[MixtureComponent, ...]

    def __post_init__(self) -> None:
        if not self.components:
            raise ValueError('A mixture needs at least one component.')
        dims = {len(component.mean) for component in self.components}
        if len(dims) != 1 or 0 in dims:
            raise ValueError(f'All mixture components must share one positive dimension, but got dimensions {sorted(dims)}.')
        total = sum(component.weight for component in self.components)
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ValueError(f'Mixture weights must sum to 1, but they sum to {total}.')

    @property
    def dim(self) -> int:
        return len(self.components[0].mean)

    @property
    def weights(self) -> Vector:
        return np.array([component.weight for component in self.components], dtype=np.float64)

    @property
    def means(self) -> Matrix:
        return np.array([component.mean for component in self.components], dtype=np.float64)

    @property
    def variances(self) -> Matrix:
        return np.array([component.variance for component in self.components], dtype=np.float64)


def gaussian(mean: Sequence[float], std: float | Sequence[float]) -> MixtureSpec:
    stds = np.broadcast_to(np.asarray(std, dtype=np.float64), (len(mean),))
    return MixtureSpec((MixtureComponent(1.0, tuple(float(m) for m in mean), tuple(float(s) ** 2 for s in stds)),))


def ring(n_modes: int = 8, radius: float = 2.0, std: float = 0.1) -> MixtureSpec:
    angles = 2.0 * np.pi * np.arange(n_modes) / n_modes
    return MixtureSpec(tuple(
        MixtureComponent(
            1.0 / n_modes,
            (float(radius * np.cos(angle)), float(radius * np.sin(angle))),
            (std ** 2, std ** 2),
        )
        for angle in angles
    ))


@dataclass(frozen=True)
class CorruptionSpec:
    fraction: float
    outlier: MixtureSpec

    def __post_init__(self) -> None:
        if not 0.0 <= self.fraction < 1.0:
            raise ValueError(f'The corruption fraction must lie in [0, 1), but got {self.fraction}.')


BENCHMARK_FRACTIONS = (0.0, 0.15, 0.30, 0.45)


class PointLabel(IntEnum):
    CLEAN = 0
    OUTLIER = 1


@dataclass(frozen=True)
class TrainingSet:
    points: Matrix
    labels: npt.NDArray[np.int64]
    seed: int

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def outlier_count(self) -> int:
        return int(np.count_nonzero(self.labels == PointLabel.OUTLIER))


def sample_mixture(spec: MixtureSpec, n: int, rng: Rng) -> Matrix:
    if n < 1:
        raise ValueError(f'Cannot draw {n} points. Draw at least one.')
    weights = spec.weights
    assignments = rng.choice(len(weights), size=n, p=weights / weights.sum())
    noise = rng.normal((n, spec.dim))
    return spec.means[assignments] + np.sqrt(spec.variances[assignments]) * noise


def outlier_count(fraction: float, n: int) -> int:
    # Round half up, unlike Python's round().
    return int(math.floor(fraction * n + 0.5))


def corrupt(clean_points: npt.ArrayLike, cspec: CorruptionSpec, rng: Rng) -> TrainingSet:
    """
    Replace a share of the points with outlier draws. The number of points does not change.
    """
    points = as_matrix(clean_points).copy()
    n = points.shape[0]
    labels = np.full(n, PointLabel.CLEAN, dtype=np.int64)
    k = outlier_count(cspec.fraction, n)
    if k:
        if cspec.outlier.dim != points.shape[1]:
            raise ValueError(f'Cannot corrupt {points.shape[1]}-dimensional points with a {cspec.outlier.dim}-dimensional outlier distribution.')
        replaced = rng.permutation(n)[:k]
        points[replaced] = sample_mixture(cspec.outlier, k, rng)
        labels[replaced] = PointLabel.OUTLIER
    return TrainingSet(points, labels, rng.seed)


RINGS = ring()
BLOB = gaussian((6.0, 6.0), 0.3)
GAUSSIAN = gaussian((0.0, 0.0), 1.0)


def preset(name: str) -> Tuple[MixtureSpec, MixtureSpec]:
    """
    Get a benchmark's clean and outlier distributions by name.
    """
    try:
        return _PRESETS[name]
    except KeyError:
        raise ValueError(f'Unknown data preset "{name}". Choose one of {", ".join(_PRESETS)}.') from None


_PRESETS = {
    'rings-vs-blob': (RINGS, BLOB),
    'gaussian-vs-blob': (GAUSSIAN, BLOB),
}


PRESET_NAMES = tuple(_PRESETS)


def write_points_csv(path: Union[str, Path], points: npt.ArrayLike, labels: Optional[npt.ArrayLike] = None) -> None:
    points = as_matrix(points)
    frame = pd.DataFrame(points, columns=[f'x{i}' for i in range(points.shape[1])])
    if labels is not None:
        frame['label'] = [PointLabel(label).name.lower() for label in np.asarray(labels)]
    frame.to_csv(path, index=False, float_format='%.12g')


def read_points_csv(path: Union[str, Path]) -> Tuple[Matrix, Optional[npt.NDArray[np.int64]]]:
    frame = pd.read_csv(path)
    coordinate_columns = [column for column in frame.columns if column != 'label']
    if not coordinate_columns or len(frame) == 0:
        raise ValueError(f'{path} contains no points.')
    points = frame[coordinate_columns].to_numpy(dtype=np.float64)
    labels = None
    if 'label' in frame.columns:
        try:
            labels = np.array([PointLabel[str(label).upper()] for label in frame['label']], dtype=np.int64)
        except KeyError as error:
            raise ValueError(f'{path} contains an unknown point label {error}.') from None
    return points, labels
