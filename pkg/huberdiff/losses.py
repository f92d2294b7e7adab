"""
Loss kernels and time-dependent δ schedules.

Every kernel is a coordinate-wise sum over the residual and comes with its analytic gradient with respect to the
residual. Batched variants evaluate one residual per row, each row at its own time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Tuple

import numpy as np
import numpy.typing as npt
from scipy import special

from huberdiff.numerics import Vector, Matrix, ArrayLike, as_vector, as_matrix, assert_finite, ShapeError


class ScheduleKind(Enum):
    CONSTANT = 'constant'
    EXP_DECREASE = 'exp_decrease'
    # The time reversal of EXP_DECREASE.
    EXP_INCREASE = 'exp_increase'


@dataclass(frozen=True)
class DeltaSchedule:
    kind: ScheduleKind = ScheduleKind.CONSTANT
    delta0: float = 1.0
    horizon: float = 1.0

    def __post_init__(self) -> None:
        if not self.delta0 > 0:
            raise ValueError(f'δ₀ must be positive, but got {self.delta0}.')
        if not self.horizon > 0:
            raise ValueError(f'The time horizon must be positive, but got {self.horizon}.')

    def at(self, t: float) -> float:
        return delta_at(self, t)


def _assert_times(schedule: DeltaSchedule, t: npt.NDArray[np.float64]) -> None:
    if np.any(t < 0.0) or np.any(t > schedule.horizon):
        raise ValueError(f'Times must lie in [0, {schedule.horizon}], but got {t}.')


def deltas_at(schedule: DeltaSchedule, ts: ArrayLike) -> Vector:
    ts = np.asarray(ts, dtype=np.float64)
    _assert_times(schedule, ts)
    if schedule.kind is ScheduleKind.CONSTANT:
        return np.full(ts.shape, schedule.delta0)
    fraction = ts / schedule.horizon
    if schedule.kind is ScheduleKind.EXP_INCREASE:
        fraction = (schedule.horizon - ts) / schedule.horizon
    return np.exp(np.log(schedule.delta0) * fraction)


def delta_at(schedule: DeltaSchedule, t: float) -> float:
    return float(deltas_at(schedule, t))


class LossKind(Enum):
    L2 = 'l2'
    HUBER = 'huber'
    PSEUDO_HUBER = 'pseudo_huber'
    PSEUDO_HUBER_DIFFUSERS = 'pseudo_huber_diffusers'


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.L2
    schedule: DeltaSchedule = field(default_factory=DeltaSchedule)

    @property
    def name(self) -> str:
        if self.kind is LossKind.L2:
            return self.kind.value
        return f'{self.kind.value}-{self.schedule.kind.value}-{self.schedule.delta0:g}'


def _assert_positive(delta: npt.NDArray[np.float64] | float, name: str = 'δ') -> None:
    if not np.all(np.asarray(delta) > 0):
        raise ValueError(f'{name} must be positive, but got {delta}.')


def _huber_terms(x: npt.NDArray[np.float64], delta: npt.NDArray[np.float64] | float) -> npt.NDArray[np.float64]:
    return np.asarray(special.huber(delta, x), dtype=np.float64)


def _huber_grads(x: npt.NDArray[np.float64], delta: npt.NDArray[np.float64] | float) -> npt.NDArray[np.float64]:
    return np.where(np.abs(x) <= delta, x, delta * np.sign(x))


def _pseudo_huber_terms(x: npt.NDArray[np.float64], delta: npt.NDArray[np.float64] | float) -> npt.NDArray[np.float64]:
    return np.asarray(special.pseudo_huber(delta, x), dtype=np.float64)


def _pseudo_huber_grads(x: npt.NDArray[np.float64], delta: npt.NDArray[np.float64] | float) -> npt.NDArray[np.float64]:
    return x / np.sqrt(1.0 + x * x / (delta * delta))


def _pseudo_huber_diffusers_terms(x: npt.NDArray[np.float64], c: npt.NDArray[np.float64] | float) -> npt.NDArray[np.float64]:
    # √(x²+c²) − c
    return np.asarray(special.pseudo_huber(c, x), dtype=np.float64) / c


def _pseudo_huber_diffusers_grads(x: npt.NDArray[np.float64], c: npt.NDArray[np.float64] | float) -> npt.NDArray[np.float64]:
    return x / np.sqrt(x * x + c * c)


def huber(residual: ArrayLike, delta: float) -> float:
    _assert_positive(delta)
    return float(np.sum(_huber_terms(as_vector(residual), delta)))


def pseudo_huber(residual: ArrayLike, delta: float) -> float:
    _assert_positive(delta)
    return float(np.sum(_pseudo_huber_terms(as_vector(residual), delta)))


def pseudo_huber_diffusers(residual: ArrayLike, c: float) -> float:
    """
    The pseudo-Huber variant lacking the leading δ factor, which behaves like ½x²/c instead of ½x² for large c.
    """
    _assert_positive(c, 'c')
    return float(np.sum(_pseudo_huber_diffusers_terms(as_vector(residual), c)))


def _terms_and_grads(
    kind: LossKind,
    x: npt.NDArray[np.float64],
    delta: npt.NDArray[np.float64],
) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    if kind is LossKind.L2:
        return x * x, 2.0 * x
    _assert_positive(delta)
    if kind is LossKind.HUBER:
        return _huber_terms(x, delta), _huber_grads(x, delta)
    if kind is LossKind.PSEUDO_HUBER:
        return _pseudo_huber_terms(x, delta), _pseudo_huber_grads(x, delta)
    return _pseudo_huber_diffusers_terms(x, delta), _pseudo_huber_diffusers_grads(x, delta)


def loss_value_and_grad(spec: LossSpec, residual: ArrayLike, t: float) -> Tuple[float, Vector]:
    residual = assert_finite(as_vector(residual), 'residual')
    delta = np.asarray(delta_at(spec.schedule, t))
    terms, grads = _terms_and_grads(spec.kind, residual, delta)
    return float(np.sum(terms)), grads


def loss_values_and_grads(spec: LossSpec, residuals: ArrayLike, ts: ArrayLike) -> Tuple[Vector, Matrix]:
    """
    Evaluate the loss of every row of a residual matrix at the matching time.

    :return: The per-row loss values, and the gradient of each row's loss with respect to that row.
    """
    residuals = assert_finite(as_matrix(residuals), 'residuals')
    ts = as_vector(ts)
    if ts.shape[0] != residuals.shape[0]:
        raise ShapeError(f'Expected one time per residual row ({residuals.shape[0]}), but got {ts.shape[0]}.')
    deltas = deltas_at(spec.schedule, ts)[:, np.newaxis]
    terms, grads = _terms_and_grads(spec.kind, residuals, deltas)
    return np.sum(terms, axis=1), grads
