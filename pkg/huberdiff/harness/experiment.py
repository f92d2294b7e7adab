"""
Run corrupted-data training experiments and measure their resilience against clean-data baselines.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
import pandas as pd

from huberdiff.data import CorruptionSpec, TrainingSet, corrupt, preset, sample_mixture
from huberdiff.diffusion import DivergenceError, Trainer, model_score_fn, sample
from huberdiff.harness.config import GridConfig, RunConfig
from huberdiff.hooks import Hookable, HookController
from huberdiff.losses import LossSpec
from huberdiff.metrics import (
    SimilarityScore, per_sample_similarity, poison_share, resilience_diff, resilience_div, similarity, threshold_counts,
)
from huberdiff.model import Adam, ScoreNet
from huberdiff.numerics import Matrix, Rng

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.12g'

T = TypeVar('T')
U = TypeVar('U')


class _Stream(IntEnum):
    DATA = 0
    CORRUPTION = 1
    INIT = 2
    TRAINING = 3
    # Shared by a run and its clean baseline, so both are measured on the same sampler noise.
    SAMPLING = 4
    # The root of the independent clean-data run every corrupted run is compared with.
    BASELINE = 5


@dataclass(frozen=True)
class ReferenceSets:
    """
    Held-out draws from the clean and the outlier distributions, shared by every run of a benchmark.
    """

    clean: Matrix
    poison: Matrix

    @classmethod
    def for_config(cls, config: RunConfig) -> ReferenceSets:
        clean_spec, outlier_spec = preset(config.preset)
        rng = Rng(config.reference_seed)
        return cls(
            sample_mixture(clean_spec, config.n_reference, rng.split(0)),
            sample_mixture(outlier_spec, config.n_reference, rng.split(1)),
        )


@dataclass(frozen=True)
class Measurement:
    step: int
    train_loss: float
    to_clean: SimilarityScore
    to_poison: SimilarityScore
    mean_sample_similarity: float
    min_sample_similarity: float
    poison_share: float
    threshold_counts: Tuple[int, ...]


def training_set_for(config: RunConfig, root: Rng, fraction: float) -> TrainingSet:
    clean_spec, outlier_spec = preset(config.preset)
    clean_points = sample_mixture(clean_spec, config.n_train, root.split(_Stream.DATA))
    return corrupt(clean_points, CorruptionSpec(fraction, outlier_spec), root.split(_Stream.CORRUPTION))


class _CheckpointEvaluatorHookController(HookController):
    def __init__(self, evaluator: CheckpointEvaluator):
        super().__init__()
        self._evaluator = evaluator

    def __repr__(self) -> str:
        return f'<{self.__class__.__module__}.{self.__class__.__qualname__} object at {hex(id(self))} for {self._evaluator!r}>'

    def _on_fire(self) -> None:
        self._evaluator.evaluate()


class CheckpointEvaluator(Hookable):
    """
    Sample from a trainer's model whenever the trainer checkpoints, and measure the samples against the references.

    Hooks added to the evaluator run after each measurement and can pull it from :py:attr:`CheckpointEvaluator.latest`.
    """

    def __init__(self, trainer: Trainer, config: RunConfig, references: ReferenceSets, rng: Rng):
        super().__init__()
        self.hooks = _CheckpointEvaluatorHookController(self)
        self.measurements: List[Measurement] = []
        self._trainer = trainer
        self._config = config
        self._references = references
        self._rng = rng
        self._measured_until = 0

    @property
    def latest(self) -> Measurement:
        return self.measurements[-1]

    def evaluate(self) -> None:
        trainer = self._trainer
        config = self._config
        interval_losses = trainer.losses[self._measured_until:]
        self._measured_until = len(trainer.losses)
        samples = sample(
            config.sampler,
            model_score_fn(trainer.model, trainer.proc),
            trainer.proc,
            config.sampler_steps,
            self._rng.split(trainer.step),
            config.n_sample,
            trainer.model.data_dim,
        )
        to_clean = per_sample_similarity(samples, self._references.clean)
        self.measurements.append(Measurement(
            step=trainer.step,
            train_loss=float(np.mean(interval_losses)),
            to_clean=similarity(samples, self._references.clean, config.n_projections),
            to_poison=similarity(samples, self._references.poison, config.n_projections),
            mean_sample_similarity=float(np.mean(to_clean)),
            min_sample_similarity=float(np.min(to_clean)),
            poison_share=poison_share(samples, self._references.clean, self._references.poison),
            threshold_counts=tuple(int(count) for count in threshold_counts(to_clean, config.thresholds)),
        ))


def _log_progress(evaluator: CheckpointEvaluator, label: str, n_steps: int) -> Callable[[], None]:
    def log_progress() -> None:
        measurement = evaluator.latest
        logger.info(
            '%s, step %d/%d: loss %.4g, similarity to clean %.4f, to poison %.4f, poison share %.3f.',
            label,
            measurement.step,
            n_steps,
            measurement.train_loss,
            measurement.to_clean.value,
            measurement.to_poison.value,
            measurement.poison_share,
        )
    return log_progress


def pretrain(config: RunConfig) -> ScoreNet:
    """
    Train the base model every run fine-tunes, on uncorrupted data with the L2 loss.

    The base depends on neither the loss, the corruption fraction nor the seed of a run, so every cell of a grid
    shares it. Without pretraining steps it is a shared random initialization.

    :raises DivergenceError: when pretraining diverges.
    """
    proc = config.process
    root = Rng(config.pretrain_seed)
    training_set = training_set_for(config, root, 0.0)
    model = ScoreNet.initialize(
        training_set.points.shape[1],
        root.split(_Stream.INIT),
        hidden=config.hidden,
        time_feature_dim=config.time_feature_dim,
        horizon=proc.horizon,
    )
    if not config.pretrain_steps:
        return model
    trainer = Trainer(
        model,
        training_set,
        LossSpec(),
        proc,
        root.split(_Stream.TRAINING),
        batch_size=config.batch_size,
        checkpoint_interval=config.pretrain_steps,
        optimizer=Adam(config.pretrain_learning_rate),
        mode=config.residual_mode,
    )
    trainer.train(config.pretrain_steps)
    logger.info('Pretrained the base model for %d steps: final loss %.4g.', config.pretrain_steps, trainer.last_loss)
    return model


@dataclass
class TrainedRun:
    measurements: List[Measurement]
    model: ScoreNet
    training_set: TrainingSet


def train_and_measure(config: RunConfig, root: Rng, fraction: float, label: str, base: ScoreNet) -> TrainedRun:
    """
    Fine-tune a copy of the base model on a (possibly corrupted) training set and measure it at every checkpoint.

    Samples are drawn from the seed's sampling stream, which a run shares with its clean baseline.

    :raises DivergenceError: when training or sampling diverges.
    """
    proc = config.process
    training_set = training_set_for(config, root, fraction)
    model = base.copy()
    trainer = Trainer(
        model,
        training_set,
        config.loss_spec,
        proc,
        root.split(_Stream.TRAINING),
        batch_size=config.batch_size,
        checkpoint_interval=config.checkpoint_interval,
        optimizer=Adam(config.learning_rate),
        mode=config.residual_mode,
    )
    evaluator = CheckpointEvaluator(trainer, config, ReferenceSets.for_config(config), Rng(config.seed).split(_Stream.SAMPLING))
    trainer.hooks(evaluator)
    evaluator.hooks(_log_progress(evaluator, label, config.steps))
    trainer.train(config.steps)
    return TrainedRun(evaluator.measurements, model, training_set)


@dataclass(frozen=True)
class Baseline:
    """
    The measurements of a model trained on clean data, or why it could not be trained.
    """

    measurements: Tuple[Measurement, ...] = ()
    failure: Optional[str] = None


def run_baseline(config: RunConfig, base: Optional[ScoreNet] = None) -> Baseline:
    label = f'{config.loss_spec.name} clean baseline (seed {config.seed})'
    try:
        if base is None:
            base = pretrain(config)
        trained = train_and_measure(config, Rng(config.seed).split(_Stream.BASELINE), 0.0, label, base)
    except DivergenceError as error:
        logger.warning('%s diverged: %s', label, error)
        return Baseline(failure=f'clean baseline diverged: {error}')
    return Baseline(tuple(trained.measurements))


@dataclass(frozen=True)
class CheckpointRow:
    step: int
    train_loss: float
    s_to_clean: float
    s_to_poison: float
    s_baseline_to_clean: float
    s_baseline_to_poison: float
    r_diff: float
    r_div: float
    r_div_unstable: bool
    mean_sample_similarity: float
    min_sample_similarity: float
    poison_share: float
    threshold_counts: Tuple[int, ...]

    @staticmethod
    def columns(thresholds: Sequence[float]) -> List[str]:
        return [
            *(f.name for f in dataclasses.fields(CheckpointRow) if f.name != 'threshold_counts'),
            *(f'count_below_{threshold:g}' for threshold in thresholds),
        ]

    def to_record(self, thresholds: Sequence[float]) -> Dict[str, Any]:
        record: Dict[str, Any] = {
            'step': self.step,
            'train_loss': self.train_loss,
            's_to_clean': self.s_to_clean,
            's_to_poison': self.s_to_poison,
            's_baseline_to_clean': self.s_baseline_to_clean,
            's_baseline_to_poison': self.s_baseline_to_poison,
            'r_diff': self.r_diff,
            'r_div': self.r_div,
            'r_div_unstable': self.r_div_unstable,
            'mean_sample_similarity': self.mean_sample_similarity,
            'min_sample_similarity': self.min_sample_similarity,
            'poison_share': self.poison_share,
        }
        for threshold, count in zip(thresholds, self.threshold_counts):
            record[f'count_below_{threshold:g}'] = count
        return record


@dataclass(frozen=True)
class RunResult:
    config: RunConfig
    rows: Tuple[CheckpointRow, ...] = ()
    failure: Optional[str] = None
    model: Optional[ScoreNet] = field(default=None, compare=False, repr=False)
    training_set: Optional[TrainingSet] = field(default=None, compare=False, repr=False)

    @property
    def ok(self) -> bool:
        return self.failure is None

    @property
    def final(self) -> Optional[CheckpointRow]:
        return self.rows[-1] if self.rows else None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [row.to_record(self.config.thresholds) for row in self.rows],
            columns=CheckpointRow.columns(self.config.thresholds),
        )


def _join(measurements: Sequence[Measurement], baseline: Sequence[Measurement]) -> Tuple[CheckpointRow, ...]:
    baseline_by_step = {measurement.step: measurement for measurement in baseline}
    rows = []
    for measurement in measurements:
        clean = baseline_by_step[measurement.step]
        division = resilience_div(measurement.to_clean, measurement.to_poison, clean.to_clean, clean.to_poison)
        rows.append(CheckpointRow(
            step=measurement.step,
            train_loss=measurement.train_loss,
            s_to_clean=measurement.to_clean.value,
            s_to_poison=measurement.to_poison.value,
            s_baseline_to_clean=clean.to_clean.value,
            s_baseline_to_poison=clean.to_poison.value,
            r_diff=resilience_diff(measurement.to_clean, clean.to_clean),
            r_div=division.value,
            r_div_unstable=division.unstable,
            mean_sample_similarity=measurement.mean_sample_similarity,
            min_sample_similarity=measurement.min_sample_similarity,
            poison_share=measurement.poison_share,
            threshold_counts=measurement.threshold_counts,
        ))
    return tuple(rows)


def run_experiment(config: RunConfig, baseline: Optional[Baseline] = None, base: Optional[ScoreNet] = None) -> RunResult:
    """
    Fine-tune the base model on a corrupted training set and compare it with a clean-data baseline at every checkpoint.

    Divergence does not raise, but yields a failed result.
    """
    if base is None:
        try:
            base = pretrain(config)
        except DivergenceError as error:
            logger.warning('Pretraining diverged: %s', error)
            return RunResult(config, failure=f'pretraining diverged: {error}')
    if baseline is None:
        baseline = run_baseline(config, base)
    if baseline.failure is not None:
        return RunResult(config, failure=baseline.failure)
    label = f'{config.loss_spec.name} at {config.fraction:.0%} corruption (seed {config.seed})'
    try:
        trained = train_and_measure(config, Rng(config.seed), config.fraction, label, base)
    except DivergenceError as error:
        logger.warning('%s diverged: %s', label, error)
        return RunResult(config, failure=f'training diverged: {error}')
    return RunResult(config, _join(trained.measurements, baseline.measurements), model=trained.model, training_set=trained.training_set)


def write_run_result(result: RunResult, path: Union[str, Path]) -> None:
    result.to_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT)


@dataclass(frozen=True)
class GridResult:
    cell_ids: Tuple[str, ...]
    seed_indices: Tuple[int, ...]
    results: Tuple[RunResult, ...]

    def summary(self) -> pd.DataFrame:
        records = []
        for cell_id, seed_index, result in zip(self.cell_ids, self.seed_indices, self.results):
            record: Dict[str, Any] = {
                'cell_id': cell_id,
                'loss': result.config.loss_spec.name,
                'fraction': result.config.fraction,
                'seed_index': seed_index,
                'seed': result.config.seed,
                'status': 'ok' if result.ok else 'failed',
                'failure': result.failure or '',
            }
            final = result.final
            if final is not None:
                record.update(final.to_record(result.config.thresholds))
            records.append(record)
        return pd.DataFrame(records).sort_values('cell_id', kind='stable').reset_index(drop=True)

    def aggregate(self) -> pd.DataFrame:
        """
        The mean and spread of the final checkpoints over seeds, per loss and corruption fraction.
        """
        summary = self.summary()
        summary['failed'] = summary['status'] != 'ok'
        keys = ['loss', 'fraction']
        counts = summary.groupby(keys).agg(n_seeds=('status', 'size'), n_failed=('failed', 'sum'))
        succeeded = summary[~summary['failed']]
        if succeeded.empty:
            return counts.reset_index()
        statistics = succeeded.groupby(keys).agg(
            r_diff_mean=('r_diff', 'mean'),
            r_diff_std=('r_diff', 'std'),
            r_div_mean=('r_div', 'mean'),
            r_div_unstable=('r_div_unstable', 'sum'),
            s_to_clean_mean=('s_to_clean', 'mean'),
            s_to_poison_mean=('s_to_poison', 'mean'),
            poison_share_mean=('poison_share', 'mean'),
        )
        return counts.join(statistics).reset_index().sort_values(keys, kind='stable').reset_index(drop=True)

    def write(self, directory: Union[str, Path]) -> None:
        directory = Path(directory)
        cells_directory = directory / 'cells'
        cells_directory.mkdir(parents=True, exist_ok=True)
        for cell_id, result in zip(self.cell_ids, self.results):
            if result.ok:
                write_run_result(result, cells_directory / f'{cell_id}.csv')
        self.summary().to_csv(directory / 'summary.csv', index=False, float_format=FLOAT_FORMAT)
        self.aggregate().to_csv(directory / 'aggregate.csv', index=False, float_format=FLOAT_FORMAT)


def _map(function: Callable[[T], U], items: Iterable[T], parallelism: int) -> List[U]:
    items = list(items)
    if parallelism <= 1 or len(items) <= 1:
        return [function(item) for item in items]
    with Pool(min(parallelism, len(items))) as pool:
        return pool.map(function, items)


def _run_baseline(task: Tuple[RunConfig, ScoreNet]) -> Baseline:
    return run_baseline(*task)


def _run_cell(task: Tuple[RunConfig, Baseline, ScoreNet]) -> RunResult:
    config, baseline, base = task
    # Weights stay in the worker. Grid outputs only need the measurements.
    result = run_experiment(config, baseline, base)
    return RunResult(result.config, result.rows, result.failure)


def run_grid(grid: GridConfig, parallelism: int = 1) -> GridResult:
    """
    Run every cell of a grid. The base model is pretrained once. Each clean baseline is trained once per loss and seed
    and shared across fractions.

    Cells are independent, so they may run in parallel. Failed cells are reported in the result, never raised.
    """
    cells = grid.cells()
    try:
        base = pretrain(grid.run)
    except DivergenceError as error:
        logger.error('Pretraining diverged, so every grid cell fails: %s', error)
        return GridResult(
            tuple(cell.cell_id for cell in cells),
            tuple(cell.seed_index for cell in cells),
            tuple(RunResult(cell.config, failure=f'pretraining diverged: {error}') for cell in cells),
        )
    baseline_keys: Dict[Tuple[str, int], RunConfig] = {}
    for cell in cells:
        baseline_keys.setdefault((cell.config.loss_spec.name, cell.seed_index), cell.config)
    logger.info('Running a grid of %d cells on %d clean baselines.', len(cells), len(baseline_keys))
    baselines: Mapping[Tuple[str, int], Baseline] = dict(zip(
        baseline_keys,
        _map(_run_baseline, [(config, base) for config in baseline_keys.values()], parallelism),
    ))
    results = _map(
        _run_cell,
        [(cell.config, baselines[(cell.config.loss_spec.name, cell.seed_index)], base) for cell in cells],
        parallelism,
    )
    failures = sum(not result.ok for result in results)
    if failures:
        logger.warning('%d of %d grid cells failed.', failures, len(cells))
    return GridResult(
        tuple(cell.cell_id for cell in cells),
        tuple(cell.seed_index for cell in cells),
        tuple(results),
    )
