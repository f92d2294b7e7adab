"""
Similarity between sample sets, and the resilience of a corrupted-data model relative to a clean-data model.

Similarities are negative transport costs: 0 for identical sample sets, more negative for less similar ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
import numpy.typing as npt
from scipy.spatial import cKDTree

from huberdiff.numerics import Rng, ArrayLike, ShapeError, as_matrix, as_vector

# Directions for sliced transport are drawn from this stream unless a generator is given.
PROJECTION_SEED = 0x5EED

# Division-form resilience is flagged as unstable when a denominator is smaller than this.
DIVISION_GUARD = 1e-3


class SimilarityMethod(Enum):
    NEG_W1_1D = 'neg_w1_1d'
    NEG_SLICED_W = 'neg_sliced_w'


@dataclass(frozen=True)
class SimilarityScore:
    value: float
    method: SimilarityMethod


def wasserstein1_1d(a: ArrayLike, b: ArrayLike) -> float:
    """
    The exact 1-Wasserstein distance between two empirical distributions on the line.

    For equal sample counts this is the mean absolute difference of the order statistics. Otherwise the absolute
    difference of the empirical distribution functions is integrated exactly.
    """
    a = np.sort(as_vector(a))
    b = np.sort(as_vector(b))
    if not a.size or not b.size:
        raise ValueError('Cannot compute a transport distance for an empty sample set.')
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    support = np.concatenate([a, b])
    support.sort()
    widths = np.diff(support)
    cdf_a = np.searchsorted(a, support[:-1], side='right') / a.size
    cdf_b = np.searchsorted(b, support[:-1], side='right') / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * widths))


def _directions(dim: int, n_projections: int, rng: Rng) -> npt.NDArray[np.float64]:
    if n_projections < 1:
        raise ValueError(f'Sliced transport needs at least one projection, but got {n_projections}.')
    directions = rng.normal((n_projections, dim))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)  # type: ignore[no-any-return]


def sliced_wasserstein(a: ArrayLike, b: ArrayLike, n_projections: int = 256, rng: Optional[Rng] = None) -> float:
    """
    The mean 1-Wasserstein distance between projections of both sample sets onto random unit directions.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f'Cannot compare {a.shape[1]}-dimensional samples with {b.shape[1]}-dimensional samples.')
    directions = _directions(a.shape[1], n_projections, rng or Rng(PROJECTION_SEED))
    projected_a = a @ directions.T
    projected_b = b @ directions.T
    return float(np.mean([
        wasserstein1_1d(projected_a[:, i], projected_b[:, i])
        for i in range(n_projections)
    ]))


def similarity(
    generated: ArrayLike,
    reference: ArrayLike,
    n_projections: int = 256,
    rng: Optional[Rng] = None,
) -> SimilarityScore:
    generated = as_matrix(generated)
    reference = as_matrix(reference)
    if not generated.size or not reference.size:
        raise ValueError('Cannot compute the similarity of an empty sample set.')
    if generated.shape[1] == 1 and reference.shape[1] == 1:
        return SimilarityScore(-wasserstein1_1d(generated[:, 0], reference[:, 0]), SimilarityMethod.NEG_W1_1D)
    return SimilarityScore(-sliced_wasserstein(generated, reference, n_projections, rng), SimilarityMethod.NEG_SLICED_W)


def resilience_diff(corrupted_to_clean: SimilarityScore, clean_to_clean: SimilarityScore) -> float:
    """
    How much training on corrupted data lowered the similarity to the clean reference. 0 means no loss at all.
    """
    if corrupted_to_clean.method is not clean_to_clean.method:
        raise ValueError(f'Cannot compare a {corrupted_to_clean.method.value} similarity with a {clean_to_clean.method.value} similarity.')
    return corrupted_to_clean.value - clean_to_clean.value


@dataclass(frozen=True)
class DivisionResilience:
    value: float
    unstable: bool


def resilience_div(
    corrupted_to_clean: SimilarityScore,
    corrupted_to_poison: SimilarityScore,
    clean_to_clean: SimilarityScore,
    clean_to_poison: SimilarityScore,
    guard: float = DIVISION_GUARD,
) -> DivisionResilience:
    """
    The ratio of clean to poison similarity of the corrupted-data model, minus that of the clean-data model.

    This form explodes for near-zero poison similarities, stays positive when both similarities change sign, and
    does not move under proportional growth. Results are flagged rather than rejected.
    """
    scores = (corrupted_to_clean, corrupted_to_poison, clean_to_clean, clean_to_poison)
    if len({score.method for score in scores}) != 1:
        raise ValueError(f'Cannot combine similarities of different methods: {", ".join(score.method.value for score in scores)}.')
    denominators = (corrupted_to_poison.value, clean_to_poison.value)
    unstable = any(abs(denominator) < guard for denominator in denominators)
    if any(denominator == 0.0 for denominator in denominators):
        return DivisionResilience(float('nan'), True)
    value = corrupted_to_clean.value / corrupted_to_poison.value - clean_to_clean.value / clean_to_poison.value
    return DivisionResilience(value, unstable or not np.isfinite(value))


def per_sample_similarity(generated: ArrayLike, reference: ArrayLike) -> npt.NDArray[np.float64]:
    generated = as_matrix(generated)
    reference = as_matrix(reference)
    if generated.shape[1] != reference.shape[1]:
        raise ShapeError(f'Cannot compare {generated.shape[1]}-dimensional samples with {reference.shape[1]}-dimensional samples.')
    distances, _ = cKDTree(reference).query(generated)
    return -np.asarray(distances, dtype=np.float64)


def poison_share(generated: ArrayLike, clean_reference: ArrayLike, poison_reference: ArrayLike) -> float:
    """
    The share of generated points that lie closer to the poison reference than to the clean reference.
    """
    to_clean = per_sample_similarity(generated, clean_reference)
    to_poison = per_sample_similarity(generated, poison_reference)
    return float(np.mean(to_poison > to_clean))


def threshold_counts(per_sample_similarities: ArrayLike, thresholds: ArrayLike) -> npt.NDArray[np.int64]:
    similarities = np.sort(as_vector(per_sample_similarities))
    thresholds = as_vector(thresholds)
    if np.any(np.diff(thresholds) < 0):
        raise ValueError(f'Thresholds must be sorted in ascending order, but got {thresholds}.')
    return np.searchsorted(similarities, thresholds, side='left').astype(np.int64)
