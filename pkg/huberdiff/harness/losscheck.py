"""
A quick property suite for the loss kernels, their gradients, the δ schedules and network backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from huberdiff.losses import (
    DeltaSchedule, LossKind, LossSpec, ScheduleKind, deltas_at, loss_values_and_grads, pseudo_huber, pseudo_huber_diffusers,
)
from huberdiff.model import ScoreNet, check_gradients
from huberdiff.numerics import Rng, Vector

CheckFn = Callable[[Rng], float]

SEED = 0


@dataclass(frozen=True)
class Check:
    name: str
    tolerance: float
    fn: CheckFn


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tolerance: float
    exception: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.exception is None and self.error <= self.tolerance


CHECKS: Dict[str, Check] = {}


def check(name: str, tolerance: float) -> Callable[[CheckFn], CheckFn]:
    """
    Register a check. Checks return their worst error, which must not exceed the tolerance.
    """
    def decorator(fn: CheckFn) -> CheckFn:
        if name in CHECKS:
            raise ValueError(f'A check named "{name}" is registered already.')
        CHECKS[name] = Check(name, tolerance, fn)
        return fn
    return decorator


def _relative_error(actual: Vector, expected: Vector, floor: float) -> float:
    scale = np.maximum(np.maximum(np.abs(actual), np.abs(expected)), floor)
    return float(np.max(np.abs(actual - expected) / scale))


@check('pseudo-huber is δ times the diffusers variant', 1e-12)
def _check_pseudo_huber_identity(rng: Rng) -> float:
    xs = 10.0 * rng.normal(10_000)
    deltas = np.exp(rng.uniform(np.log(1e-3), np.log(1e3), 10_000))
    actual = np.array([pseudo_huber([x], delta) for x, delta in zip(xs, deltas)])
    expected = deltas * np.array([pseudo_huber_diffusers([x], delta) for x, delta in zip(xs, deltas)])
    return _relative_error(actual, expected, np.finfo(np.float64).tiny)


@check('pseudo-huber is within x⁴/8δ² of x²/2', 1e-14)
def _check_quadratic_limit(rng: Rng) -> float:
    xs = np.linspace(-10.0, 10.0, 2001)
    worst = 0.0
    for delta in np.geomspace(0.01, 10.0, 31):
        values, _ = loss_values_and_grads(LossSpec(LossKind.PSEUDO_HUBER, DeltaSchedule(delta0=delta)), xs[:, np.newaxis], np.zeros_like(xs))
        excess = np.abs(values - 0.5 * xs * xs) - xs ** 4 / (8.0 * delta * delta)
        # Measured relative to x², so that rounding in the kernel itself does not count as a violation.
        worst = max(worst, float(np.max(excess / np.maximum(xs * xs, 1e-300))))
    return worst


def _loss_gradient_error(kind: LossKind, rng: Rng) -> float:
    h = 1e-6
    worst = 0.0
    for delta in (0.05, 0.5, 5.0):
        spec = LossSpec(kind, DeltaSchedule(delta0=delta))
        xs = 2.0 * rng.normal(1000)
        if kind is LossKind.HUBER:
            # Huber's second derivative jumps at |x| = δ.
            xs = xs[np.abs(np.abs(xs) - delta) > 1e-3]
        ts = np.zeros_like(xs)
        _, grads = loss_values_and_grads(spec, xs[:, np.newaxis], ts)
        plus, _ = loss_values_and_grads(spec, (xs + h)[:, np.newaxis], ts)
        minus, _ = loss_values_and_grads(spec, (xs - h)[:, np.newaxis], ts)
        worst = max(worst, _relative_error(grads[:, 0], (plus - minus) / (2.0 * h), 1e-2))
    return worst


@check('l2 gradient', 1e-5)
def _check_l2_gradient(rng: Rng) -> float:
    return _loss_gradient_error(LossKind.L2, rng)


@check('huber gradient', 1e-5)
def _check_huber_gradient(rng: Rng) -> float:
    return _loss_gradient_error(LossKind.HUBER, rng)


@check('pseudo-huber gradient', 1e-5)
def _check_pseudo_huber_gradient(rng: Rng) -> float:
    return _loss_gradient_error(LossKind.PSEUDO_HUBER, rng)


@check('diffusers pseudo-huber gradient', 1e-5)
def _check_pseudo_huber_diffusers_gradient(rng: Rng) -> float:
    return _loss_gradient_error(LossKind.PSEUDO_HUBER_DIFFUSERS, rng)


@check('pseudo-huber with a huge δ is half l2', 1e-9)
def _check_l2_limit(rng: Rng) -> float:
    residuals = rng.normal((100, 2))
    ts = rng.uniform(0.0, 1.0, 100)
    pseudo_huber_values, _ = loss_values_and_grads(LossSpec(LossKind.PSEUDO_HUBER, DeltaSchedule(delta0=1e6)), residuals, ts)
    l2_values, _ = loss_values_and_grads(LossSpec(LossKind.L2), residuals, ts)
    return _relative_error(pseudo_huber_values, 0.5 * l2_values, 1e-12)


@check('schedules start at 1 and end at δ₀', 1e-15)
def _check_schedule_endpoints(rng: Rng) -> float:
    worst = 0.0
    for delta0 in (0.01, 0.1, 0.5, 2.0):
        schedule = DeltaSchedule(ScheduleKind.EXP_DECREASE, delta0)
        worst = max(worst, abs(schedule.at(0.0) - 1.0), abs(schedule.at(schedule.horizon) - delta0) / delta0)
    return worst


@check('schedules decrease strictly for δ₀ < 1', 0.0)
def _check_schedule_monotonicity(rng: Rng) -> float:
    for delta0 in (0.01, 0.1, 0.5, 0.99):
        deltas = deltas_at(DeltaSchedule(ScheduleKind.EXP_DECREASE, delta0), np.linspace(0.0, 1.0, 1001))
        if np.any(np.diff(deltas) >= 0.0):
            return 1.0
    return 0.0


@check('increasing schedules reverse decreasing ones', 0.0)
def _check_schedule_reversal(rng: Rng) -> float:
    ts = np.linspace(0.0, 1.0, 1001)
    worst = 0.0
    for delta0 in (0.01, 0.1, 0.5):
        increasing = deltas_at(DeltaSchedule(ScheduleKind.EXP_INCREASE, delta0), ts)
        decreasing = deltas_at(DeltaSchedule(ScheduleKind.EXP_DECREASE, delta0), 1.0 - ts)
        worst = max(worst, float(np.max(np.abs(increasing - decreasing))))
    return worst


@check('network backpropagation', 1e-4)
def _check_network_gradients(rng: Rng) -> float:
    net = ScoreNet.initialize(2, rng.split(0), hidden=(8, 8), time_feature_dim=4)
    x = rng.normal((3, 2))
    t = rng.uniform(0.0, 1.0, 3)
    return check_gradients(net, x, t, rng.normal((3, 2)))


def run_checks(seed: int = SEED) -> List[CheckResult]:
    results = []
    root = Rng(seed)
    for index, registered in enumerate(CHECKS.values()):
        try:
            error = registered.fn(root.split(index))
        except Exception as exception:
            results.append(CheckResult(registered.name, float('nan'), registered.tolerance, f'{type(exception).__name__}: {exception}'))
        else:
            results.append(CheckResult(registered.name, error, registered.tolerance))
    return results


def format_results(results: List[CheckResult]) -> str:
    table = pd.DataFrame({
        'check': [result.name for result in results],
        'worst error': [f'{result.error:.3g}' for result in results],
        'tolerance': [f'{result.tolerance:.3g}' for result in results],
        'result': ['PASS' if result.passed else 'FAIL' for result in results],
    })
    lines = [table.to_string(index=False, justify='left')]
    for result in results:
        if result.exception is not None:
            lines.append(f'{result.name}: {result.exception}')
    return '\n'.join(lines)
