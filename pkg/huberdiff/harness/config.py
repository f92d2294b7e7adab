"""
Run and grid configuration, and their JSON representations.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, Mapping, Sequence, Tuple, Type, TypeVar, Union

from huberdiff.data import BENCHMARK_FRACTIONS, PRESET_NAMES
from huberdiff.diffusion import ResidualMode, SamplerKind, VpProcess
from huberdiff.losses import DeltaSchedule, LossKind, LossSpec, ScheduleKind
from huberdiff.numerics import Rng

DataclassT = TypeVar('DataclassT')


class ConfigError(ValueError):
    pass


def _convert(name: str, default: Any, value: Any) -> Any:
    """
    Convert a JSON value to the type of a field's default value.
    """
    if isinstance(default, Enum):
        try:
            return type(default)(value)
        except ValueError:
            choices = ', '.join(str(member.value) for member in type(default))
            raise ConfigError(f'"{value}" is not a valid value for "{name}". Choose one of {choices}.') from None
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f'"{name}" must be a list, but got {value!r}.')
        item_default = default[0] if default else 0.0
        return tuple(_convert(name, item_default, item) for item in value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f'"{name}" must be true or false, but got {value!r}.')
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f'"{name}" must be an integer, but got {value!r}.')
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f'"{name}" must be a number, but got {value!r}.')
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f'"{name}" must be a string, but got {value!r}.')
        return value
    return value


def _from_dict(cls: Type[DataclassT], values: Mapping[str, Any], where: str) -> DataclassT:
    fields = {f.name: f for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f'Unknown {where} field(s): {", ".join(unknown)}. Known fields are: {", ".join(fields)}.')
    defaults = cls()
    converted = {
        name: _convert(name, getattr(defaults, name), value)
        for name, value in values.items()
    }
    try:
        return cls(**converted)
    except ValueError as error:
        raise ConfigError(str(error)) from error


def _to_json_value(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return [_to_json_value(item) for item in value]
    return value


@dataclass(frozen=True)
class RunConfig:
    """
    Everything that determines a single run: one loss fine-tuning the shared base model on one corrupted dataset with
    one seed. The pretrain_* fields and the data, network and process fields determine the base model.
    """

    preset: str = 'rings-vs-blob'
    fraction: float = 0.45
    loss: LossKind = LossKind.PSEUDO_HUBER
    schedule: ScheduleKind = ScheduleKind.EXP_DECREASE
    delta0: float = 0.1
    steps: int = 2000
    batch_size: int = 256
    learning_rate: float = 5e-5
    pretrain_steps: int = 3000
    pretrain_learning_rate: float = 1e-3
    pretrain_seed: int = 0
    n_train: int = 2048
    n_sample: int = 4096
    n_reference: int = 4096
    reference_seed: int = 20240
    sampler: SamplerKind = SamplerKind.SDE
    sampler_steps: int = 500
    seed: int = 0
    checkpoint_interval: int = 200
    hidden: Tuple[int, ...] = (64, 64)
    time_feature_dim: int = 16
    residual_mode: ResidualMode = ResidualMode.NOISE
    n_projections: int = 256
    thresholds: Tuple[float, ...] = (-1.0, -0.5, -0.25, -0.1)
    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self) -> None:
        if self.preset not in PRESET_NAMES:
            raise ConfigError(f'Unknown data preset "{self.preset}". Choose one of {", ".join(PRESET_NAMES)}.')
        if not 0.0 <= self.fraction < 1.0:
            raise ConfigError(f'The corruption fraction must lie in [0, 1), but got {self.fraction}.')
        for name in ('steps', 'batch_size', 'n_train', 'n_sample', 'n_reference', 'sampler_steps', 'checkpoint_interval', 'n_projections'):
            if getattr(self, name) < 1:
                raise ConfigError(f'"{name}" must be positive, but got {getattr(self, name)}.')
        if not self.learning_rate > 0 or not self.pretrain_learning_rate > 0:
            raise ConfigError(f'Learning rates must be positive, but got {self.learning_rate} and {self.pretrain_learning_rate}.')
        if self.pretrain_steps < 0:
            raise ConfigError(f'"pretrain_steps" must not be negative, but got {self.pretrain_steps}.')
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError(f'The network needs at least one nonempty hidden layer, but got {self.hidden}.')
        if self.time_feature_dim < 2 or self.time_feature_dim % 2:
            raise ConfigError(f'The time feature dimension must be a positive even number, but got {self.time_feature_dim}.')
        if list(self.thresholds) != sorted(self.thresholds):
            raise ConfigError(f'Thresholds must be sorted in ascending order, but got {self.thresholds}.')
        if min(self.seed, self.reference_seed, self.pretrain_seed) < 0:
            raise ConfigError('Seeds must be nonnegative.')
        # Fail on invalid loss and process parameters now rather than halfway through a grid.
        self.loss_spec
        self.process

    @property
    def process(self) -> VpProcess:
        try:
            return VpProcess(self.beta_min, self.beta_max)
        except ValueError as error:
            raise ConfigError(str(error)) from error

    @property
    def loss_spec(self) -> LossSpec:
        if self.loss is LossKind.L2:
            # δ plays no role in the L2 loss, so neither its schedule nor δ₀ are validated.
            return LossSpec(self.loss)
        try:
            return LossSpec(self.loss, DeltaSchedule(self.schedule, self.delta0, self.process.horizon))
        except ValueError as error:
            raise ConfigError(str(error)) from error

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> RunConfig:
        return _from_dict(cls, values, 'run configuration')

    def to_dict(self) -> Dict[str, Any]:
        return {
            f.name: _to_json_value(getattr(self, f.name))
            for f in dataclasses.fields(self)
        }


@dataclass(frozen=True)
class LossAxis:
    """
    One loss with one or more δ₀ values to try it with.
    """

    loss: LossKind = LossKind.L2
    schedule: ScheduleKind = ScheduleKind.CONSTANT
    delta0: Tuple[float, ...] = (1.0,)

    def __post_init__(self) -> None:
        if not self.delta0:
            raise ConfigError(f'The {self.loss.value} loss needs at least one δ₀ value.')

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> LossAxis:
        values = dict(values)
        if isinstance(values.get('delta0'), (int, float)):
            values['delta0'] = [values['delta0']]
        return _from_dict(cls, values, 'loss')

    def to_dict(self) -> Dict[str, Any]:
        return {
            'loss': self.loss.value,
            'schedule': self.schedule.value,
            'delta0': list(self.delta0),
        }

    def expand(self) -> Iterator[Tuple[LossKind, ScheduleKind, float]]:
        if self.loss is LossKind.L2:
            # δ plays no role in the L2 loss.
            yield self.loss, ScheduleKind.CONSTANT, 1.0
            return
        for delta0 in self.delta0:
            yield self.loss, self.schedule, delta0


@dataclass(frozen=True)
class GridCell:
    cell_id: str
    seed_index: int
    config: RunConfig


def derive_seed(master_seed: int, seed_index: int) -> int:
    return int(Rng(master_seed).split(seed_index).generator.integers(0, 2 ** 63))


@dataclass(frozen=True)
class GridConfig:
    """
    The cross product of corruption fractions, losses (with their δ₀ values) and seeds, on top of a base run.
    """

    run: RunConfig = field(default_factory=RunConfig)
    fractions: Tuple[float, ...] = BENCHMARK_FRACTIONS
    losses: Tuple[LossAxis, ...] = (LossAxis(),)
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    master_seed: int = 0

    def __post_init__(self) -> None:
        if not self.fractions or not self.losses or not self.seeds:
            raise ConfigError('A grid needs at least one fraction, one loss and one seed.')
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f'Grid seeds must be unique, but got {self.seeds}.')
        if min(self.seeds) < 0:
            raise ConfigError(f'Grid seeds must be nonnegative, but got {self.seeds}.')
        # Every cell must expand to a valid run.
        self.cells()

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> GridConfig:
        values = dict(values)
        unknown = sorted(set(values) - {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise ConfigError(f'Unknown grid configuration field(s): {", ".join(unknown)}.')
        defaults = cls()
        try:
            return cls(
                run=RunConfig.from_dict(values.get('run', {})),
                fractions=_convert('fractions', defaults.fractions, values.get('fractions', list(defaults.fractions))),
                losses=tuple(LossAxis.from_dict(loss) for loss in values.get('losses', [axis.to_dict() for axis in defaults.losses])),
                seeds=_convert('seeds', defaults.seeds, values.get('seeds', list(defaults.seeds))),
                master_seed=_convert('master_seed', defaults.master_seed, values.get('master_seed', defaults.master_seed)),
            )
        except ConfigError:
            raise
        except ValueError as error:
            raise ConfigError(str(error)) from error

    def to_dict(self) -> Dict[str, Any]:
        return {
            'run': self.run.to_dict(),
            'fractions': list(self.fractions),
            'losses': [axis.to_dict() for axis in self.losses],
            'seeds': list(self.seeds),
            'master_seed': self.master_seed,
        }

    def cells(self) -> Sequence[GridCell]:
        cells = []
        for fraction in self.fractions:
            for axis in self.losses:
                for loss, schedule, delta0 in axis.expand():
                    for seed_index in self.seeds:
                        config = dataclasses.replace(
                            self.run,
                            fraction=fraction,
                            loss=loss,
                            schedule=schedule,
                            delta0=delta0,
                            seed=derive_seed(self.master_seed, seed_index),
                        )
                        cell_id = f'{config.loss_spec.name}__f{fraction:.2f}__s{seed_index}'
                        cells.append(GridCell(cell_id, seed_index, config))
        return cells


def load_run_config(path: Union[str, Path]) -> RunConfig:
    return RunConfig.from_dict(_load_json(path))


def load_grid_config(path: Union[str, Path]) -> GridConfig:
    return GridConfig.from_dict(_load_json(path))


def _load_json(path: Union[str, Path]) -> Mapping[str, Any]:
    try:
        with open(path) as f:
            values = json.load(f)
    except json.JSONDecodeError as error:
        raise ConfigError(f'{path} is not valid JSON: {error}.') from None
    if not isinstance(values, dict):
        raise ConfigError(f'{path} must contain a JSON object.')
    return values


def dump_config(config: Union[RunConfig, GridConfig], path: Union[str, Path]) -> None:
    with open(path, 'w') as f:
        json.dump(config.to_dict(), f, indent=2)
        f.write('\n')


BENCH_CONFIG_PATH = Path(__file__).resolve().parent / 'bench.json'
