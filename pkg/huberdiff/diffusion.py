"""
The variance-preserving diffusion process, its denoising score matching objective, and reverse-time samplers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, List, Mapping, Optional, Tuple

import numpy as np
import numpy.typing as npt
from scipy.special import logsumexp, softmax

from huberdiff.data import MixtureSpec, TrainingSet
from huberdiff.hooks import Hookable, HookController
from huberdiff.losses import LossSpec, loss_values_and_grads
from huberdiff.model import Adam, ScoreNet
from huberdiff.numerics import Matrix, Rng, ArrayLike, DTYPE, ShapeError, as_matrix

try:
    from typing_extensions import TypeAlias
except ImportError:  # pragma: no cover
    from typing import TypeAlias  # type: ignore  # pragma: no cover


logger = logging.getLogger(__name__)

# The conditional score diverges like 1/√var as t approaches 0, so times are truncated here.
T_MIN = 1e-3


class DivergenceError(RuntimeError):
    def __init__(self, message: str, diagnostics: Mapping[str, Any]):
        super().__init__(f'{message} Diagnostics: {dict(diagnostics)}')
        self.diagnostics = dict(diagnostics)


@dataclass(frozen=True)
class MarginalStats:
    mean_coef: npt.NDArray[np.float64] | float
    var: npt.NDArray[np.float64] | float

    @property
    def std(self) -> npt.NDArray[np.float64] | float:
        return np.sqrt(self.var)  # type: ignore[no-any-return]


@dataclass(frozen=True)
class VpProcess:
    """
    The forward SDE dX = -½β(t)X dt + √β(t) dW with β growing linearly from beta_min to beta_max over the horizon.
    """

    beta_min: float = 0.1
    beta_max: float = 20.0
    horizon: float = 1.0

    def __post_init__(self) -> None:
        if not 0 < self.beta_min <= self.beta_max:
            raise ValueError(f'Expected 0 < beta_min <= beta_max, but got beta_min={self.beta_min} and beta_max={self.beta_max}.')
        if not self.horizon > 0:
            raise ValueError(f'The time horizon must be positive, but got {self.horizon}.')

    def _assert_times(self, t: npt.NDArray[np.float64]) -> None:
        if np.any(t < 0.0) or np.any(t > self.horizon):
            raise ValueError(f'Times must lie in [0, {self.horizon}], but got {t}.')

    def beta(self, t: ArrayLike) -> npt.NDArray[np.float64]:
        t = np.asarray(t, dtype=DTYPE)
        return self.beta_min + (t / self.horizon) * (self.beta_max - self.beta_min)  # type: ignore[no-any-return]

    def integrated_beta(self, t: ArrayLike) -> npt.NDArray[np.float64]:
        t = np.asarray(t, dtype=DTYPE)
        return self.beta_min * t + (self.beta_max - self.beta_min) * t * t / (2.0 * self.horizon)  # type: ignore[no-any-return]

    def drift(self, x: Matrix, t: float) -> Matrix:
        return -0.5 * self.beta(t) * x  # type: ignore[no-any-return]

    def diffusion(self, t: float) -> float:
        return float(np.sqrt(self.beta(t)))


def marginal_stats(proc: VpProcess, t: ArrayLike) -> MarginalStats:
    ts = np.asarray(t, dtype=DTYPE)
    proc._assert_times(ts)
    integrated = proc.integrated_beta(ts)
    mean_coef = np.exp(-0.5 * integrated)
    # 1 - e^(-B), accurate for small B.
    var = -np.expm1(-integrated)
    if ts.ndim == 0:
        return MarginalStats(float(mean_coef), float(var))
    return MarginalStats(mean_coef, var)


def _column(values: npt.NDArray[np.float64] | float, x: npt.NDArray[np.float64]) -> npt.NDArray[np.float64] | float:
    # Per-row coefficients broadcast over the coordinates of a batch.
    if isinstance(values, np.ndarray) and values.ndim == 1 and x.ndim == 2:
        return values[:, np.newaxis]
    return values


def perturb(proc: VpProcess, x0: ArrayLike, t: ArrayLike, eps: ArrayLike) -> npt.NDArray[np.float64]:
    x0 = np.asarray(x0, dtype=DTYPE)
    eps = np.asarray(eps, dtype=DTYPE)
    if x0.shape != eps.shape:
        raise ShapeError(f'The data of shape {x0.shape} and the noise of shape {eps.shape} do not match.')
    stats = marginal_stats(proc, t)
    return _column(stats.mean_coef, x0) * x0 + _column(np.sqrt(stats.var), x0) * eps  # type: ignore[no-any-return]


def conditional_score(proc: VpProcess, x_t: ArrayLike, x0: ArrayLike, t: ArrayLike) -> npt.NDArray[np.float64]:
    x_t = np.asarray(x_t, dtype=DTYPE)
    x0 = np.asarray(x0, dtype=DTYPE)
    if x_t.shape != x0.shape:
        raise ShapeError(f'The noisy data of shape {x_t.shape} and the clean data of shape {x0.shape} do not match.')
    stats = marginal_stats(proc, t)
    if np.any(np.asarray(stats.var) <= 0.0):
        raise ValueError(f'The conditional score is singular at t={t}.')
    return -(x_t - _column(stats.mean_coef, x_t) * x0) / _column(stats.var, x_t)  # type: ignore[no-any-return]


class ResidualMode(Enum):
    # ε̂ − ε, the default.
    NOISE = 'noise'
    # s_θ − ∇log p(x_t | x0), which equals −(ε̂ − ε)/√var.
    SCORE = 'score'


def training_residual(
    model: ScoreNet,
    proc: VpProcess,
    x0: ArrayLike,
    t: ArrayLike,
    eps: ArrayLike,
    mode: ResidualMode = ResidualMode.NOISE,
    t_min: float = T_MIN,
) -> Tuple[Matrix, npt.NDArray[np.float64]]:
    """
    Compute the residual the loss kernel is applied to, one row per example.

    :return: The residuals, and the derivative of each residual row with respect to the network output.
    """
    x0 = as_matrix(x0)
    eps = as_matrix(eps)
    ts = np.broadcast_to(np.asarray(t, dtype=DTYPE), (x0.shape[0],))
    if np.any(ts < t_min):
        raise ValueError(f'Training times must be at least {t_min}, but got {ts.min()}.')
    x_t = perturb(proc, x0, ts, eps)
    eps_hat = as_matrix(model.forward(x_t, ts))
    residual = eps_hat - eps
    if mode is ResidualMode.SCORE:
        scale = -1.0 / np.sqrt(np.asarray(marginal_stats(proc, ts).var))[:, np.newaxis]
        return scale * residual, np.broadcast_to(scale, residual.shape)
    return residual, np.ones_like(residual)


def training_step(
    model: ScoreNet,
    optimizer: Adam,
    batch: ArrayLike,
    spec: LossSpec,
    proc: VpProcess,
    rng: Rng,
    mode: ResidualMode = ResidualMode.NOISE,
    t_min: float = T_MIN,
) -> float:
    """
    Take one optimizer step on the batch-mean loss.

    :return: The batch-mean loss before the update.
    """
    batch = as_matrix(batch)
    if batch.shape[0] == 0:
        raise ValueError('Cannot train on an empty batch.')
    size = batch.shape[0]
    ts = rng.uniform(t_min, proc.horizon, size)
    eps = rng.normal(batch.shape)
    residual, residual_grad = training_residual(model, proc, batch, ts, eps, mode, t_min)
    diagnostics = {
        'step': optimizer.step_count + 1,
        'loss_kind': spec.name,
        'earliest_t': float(ts.min()),
        'latest_t': float(ts.max()),
    }
    if not np.all(np.isfinite(residual)):
        raise DivergenceError('The training residual is not finite.', diagnostics)
    values, grads = loss_values_and_grads(spec, residual, ts)
    loss = float(np.mean(values))
    if not np.isfinite(loss) or not np.all(np.isfinite(grads)):
        raise DivergenceError('The training loss is not finite.', {
            **diagnostics,
            'loss': loss,
            'residual_norm': float(np.linalg.norm(residual)),
        })
    parameter_grads = model.backward(grads * residual_grad / size)
    optimizer.step(model.parameters, parameter_grads)
    return loss


ScoreFn: TypeAlias = Callable[[Matrix, float], Matrix]


def model_score_fn(model: ScoreNet, proc: VpProcess) -> ScoreFn:
    def score(x: Matrix, t: float) -> Matrix:
        return -as_matrix(model.forward(x, t)) / np.sqrt(marginal_stats(proc, t).var)  # type: ignore[no-any-return]
    return score


def _perturbed_mixture(mixture: MixtureSpec, proc: VpProcess, t: float) -> Tuple[Matrix, Matrix]:
    stats = marginal_stats(proc, t)
    means = stats.mean_coef * mixture.means
    variances = stats.mean_coef ** 2 * mixture.variances + stats.var  # type: ignore[operator]
    return means, variances


def _component_log_densities(mixture: MixtureSpec, proc: VpProcess, x: Matrix, t: float) -> Tuple[Matrix, Matrix, Matrix]:
    means, variances = _perturbed_mixture(mixture, proc, t)
    # Rows are points, columns are components.
    diff = x[:, np.newaxis, :] - means[np.newaxis, :, :]
    with np.errstate(divide='ignore'):
        log_weights = np.log(mixture.weights)
    log_densities = log_weights - 0.5 * np.sum(diff * diff / variances + np.log(2.0 * np.pi * variances), axis=2)
    return log_densities, diff, variances


def mixture_log_density(mixture: MixtureSpec, proc: VpProcess, x: ArrayLike, t: float) -> npt.NDArray[np.float64]:
    log_densities, _, _ = _component_log_densities(mixture, proc, as_matrix(x), t)
    return logsumexp(log_densities, axis=1)  # type: ignore[no-any-return]


def analytic_mixture_score(mixture: MixtureSpec, proc: VpProcess, x: ArrayLike, t: float) -> npt.NDArray[np.float64]:
    """
    The exact score of a Gaussian mixture's marginal at time t.

    The marginal is itself a Gaussian mixture with means mean_coef·μ and variances mean_coef²·σ² + var, so the
    score is the responsibility-weighted sum of the component scores.
    """
    if not 0.0 < t <= proc.horizon:
        raise ValueError(f'The mixture score is defined for t in (0, {proc.horizon}], but got {t}.')
    x_array = np.asarray(x, dtype=DTYPE)
    points = as_matrix(x_array)
    if points.shape[1] != mixture.dim:
        raise ShapeError(f'Expected points of dimension {mixture.dim}, but got {points.shape[1]}.')
    log_densities, diff, variances = _component_log_densities(mixture, proc, points, t)
    responsibilities = softmax(log_densities, axis=1)
    score = -np.einsum('nk,nkd->nd', responsibilities, diff / variances[np.newaxis, :, :])
    return score[0] if x_array.ndim == 1 else score  # type: ignore[no-any-return]


def mixture_score_fn(mixture: MixtureSpec, proc: VpProcess) -> ScoreFn:
    def score(x: Matrix, t: float) -> Matrix:
        return analytic_mixture_score(mixture, proc, x, t)
    return score


def _time_grid(proc: VpProcess, n_steps: int, t_min: float) -> npt.NDArray[np.float64]:
    if n_steps < 1:
        raise ValueError(f'Sampling needs at least one integration step, but got {n_steps}.')
    return np.linspace(proc.horizon, t_min, n_steps + 1)


def _assert_finite_state(x: Matrix, t: float, step: int) -> None:
    if not np.all(np.isfinite(x)):
        raise DivergenceError('The sampler state is not finite.', {
            'step': step,
            't': t,
            'non_finite': int(np.count_nonzero(~np.isfinite(x))),
        })


def sample_reverse_sde(
    score_fn: ScoreFn,
    proc: VpProcess,
    n_steps: int,
    rng: Rng,
    n_samples: int,
    dim: int,
    t_min: float = T_MIN,
) -> Matrix:
    """
    Integrate the reverse-time SDE from the standard normal prior with Euler-Maruyama on a uniform grid.
    """
    grid = _time_grid(proc, n_steps, t_min)
    x = rng.normal((n_samples, dim))
    for step, (t, t_next) in enumerate(zip(grid[:-1], grid[1:])):
        dt = t - t_next
        g = proc.diffusion(t)
        x = x - (proc.drift(x, t) - g * g * score_fn(x, t)) * dt + g * np.sqrt(dt) * rng.normal(x.shape)
        _assert_finite_state(x, t_next, step)
    return x


def sample_probability_flow_ode(
    score_fn: ScoreFn,
    proc: VpProcess,
    n_steps: int,
    rng: Rng,
    n_samples: int,
    dim: int,
    t_min: float = T_MIN,
) -> Matrix:
    """
    Integrate the probability flow ODE from the standard normal prior with Euler steps on a uniform grid.
    """
    grid = _time_grid(proc, n_steps, t_min)
    x = rng.normal((n_samples, dim))
    for step, (t, t_next) in enumerate(zip(grid[:-1], grid[1:])):
        g = proc.diffusion(t)
        x = x - (proc.drift(x, t) - 0.5 * g * g * score_fn(x, t)) * (t - t_next)
        _assert_finite_state(x, t_next, step)
    return x


class SamplerKind(Enum):
    SDE = 'sde'
    ODE = 'ode'


def sample(kind: SamplerKind, score_fn: ScoreFn, proc: VpProcess, n_steps: int, rng: Rng, n_samples: int, dim: int) -> Matrix:
    if kind is SamplerKind.ODE:
        return sample_probability_flow_ode(score_fn, proc, n_steps, rng, n_samples, dim)
    return sample_reverse_sde(score_fn, proc, n_steps, rng, n_samples, dim)


class Trainer(Hookable):
    """
    Train a network on a fixed training set, firing hooks at every checkpoint.

    Hooks pull the current :py:attr:`Trainer.step` and :py:attr:`Trainer.losses` from the trainer.
    """

    def __init__(
        self,
        model: ScoreNet,
        training_set: TrainingSet,
        spec: LossSpec,
        proc: VpProcess,
        rng: Rng,
        *,
        batch_size: int = 256,
        checkpoint_interval: int = 200,
        optimizer: Optional[Adam] = None,
        mode: ResidualMode = ResidualMode.NOISE,
    ):
        super().__init__()
        if batch_size < 1:
            raise ValueError(f'The batch size must be positive, but got {batch_size}.')
        if checkpoint_interval < 1:
            raise ValueError(f'The checkpoint interval must be positive, but got {checkpoint_interval}.')
        self.hooks = HookController()
        self.model = model
        self.training_set = training_set
        self.spec = spec
        self.proc = proc
        self.optimizer = optimizer or Adam()
        self.mode = mode
        self.batch_size = batch_size
        self.checkpoint_interval = checkpoint_interval
        self.step = 0
        self.losses: List[float] = []
        self._rng = rng

    @property
    def last_loss(self) -> float:
        return self.losses[-1] if self.losses else float('nan')

    def _batch(self) -> Matrix:
        indices = self._rng.integers(len(self.training_set), self.batch_size)
        return self.training_set.points[indices]

    def train(self, n_steps: int) -> List[float]:
        """
        Take a number of training steps. Hooks fire after every multiple of the checkpoint interval and after the
        final step.

        :return: The loss of every step taken.
        """
        losses = []
        for i in range(n_steps):
            loss = training_step(self.model, self.optimizer, self._batch(), self.spec, self.proc, self._rng, self.mode)
            self.step += 1
            self.losses.append(loss)
            losses.append(loss)
            logger.debug('Step %d of %s training: loss %.6g.', self.step, self.spec.name, loss)
            if self.step % self.checkpoint_interval == 0 or i == n_steps - 1:
                self.hooks.fire()
        return losses
