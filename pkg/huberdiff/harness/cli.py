"""
The huberdiff command line.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, NoReturn, Optional, Sequence

from huberdiff.data import read_points_csv, write_points_csv
from huberdiff.diffusion import DivergenceError, SamplerKind, VpProcess, model_score_fn, sample
from huberdiff.harness.config import BENCH_CONFIG_PATH, ConfigError, RunConfig, dump_config, load_grid_config, load_run_config
from huberdiff.harness.experiment import FLOAT_FORMAT, run_experiment, run_grid, write_run_result
from huberdiff.harness.losscheck import format_results, run_checks
from huberdiff.metrics import resilience_diff, resilience_div, similarity
from huberdiff.model import load_checkpoint, save_checkpoint
from huberdiff.numerics import Rng

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class _UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f'{self.prog}: error: {message}\n')


def _train(args: argparse.Namespace) -> int:
    config = load_run_config(args.config) if args.config else RunConfig()
    overrides: Dict[str, Any] = {
        name: getattr(args, name)
        for name in ('seed', 'steps', 'fraction')
        if getattr(args, name) is not None
    }
    config = dataclasses.replace(config, **overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(config, out / 'config.json')
    result = run_experiment(config)
    if result.failure is not None:
        logger.error('Training failed: %s', result.failure)
        return EXIT_FAILURE
    assert result.model is not None
    assert result.training_set is not None
    write_run_result(result, out / 'checkpoints.csv')
    save_checkpoint(result.model, out / 'model.bin')
    write_points_csv(out / 'training_set.csv', result.training_set.points, result.training_set.labels)
    print(result.to_frame().tail(1).to_string(index=False, float_format=lambda value: FLOAT_FORMAT % value))
    logger.info('Wrote the checkpoints, the model and the training set to %s.', out)
    return EXIT_OK


def _sample(args: argparse.Namespace) -> int:
    net = load_checkpoint(args.model)
    # A run directory written by train records the process the model was trained with.
    run_config_path = Path(args.model).parent / 'config.json'
    run_config = load_run_config(run_config_path) if run_config_path.is_file() else RunConfig()
    beta_min = run_config.beta_min if args.beta_min is None else args.beta_min
    beta_max = run_config.beta_max if args.beta_max is None else args.beta_max
    try:
        proc = VpProcess(beta_min, beta_max, net.horizon)
    except ValueError as error:
        raise _UsageError(str(error)) from error
    points = sample(SamplerKind(args.sampler), model_score_fn(net, proc), proc, args.steps, Rng(args.seed), args.n, net.data_dim)
    write_points_csv(args.out, points)
    logger.info('Wrote %d samples to %s.', args.n, args.out)
    return EXIT_OK


def _print_value(name: str, value: float) -> None:
    # Adding 0.0 turns -0.0 into 0.0.
    print(f'{name}\t{FLOAT_FORMAT % (value + 0.0)}')


def _evaluate(args: argparse.Namespace) -> int:
    generated, _ = read_points_csv(args.generated)
    reference, _ = read_points_csv(args.reference)
    to_reference = similarity(generated, reference, args.projections)
    _print_value('similarity', to_reference.value)
    print(f'method\t{to_reference.method.value}')
    if args.baseline is None:
        print('r_diff\tundefined without a clean baseline')
        return EXIT_OK
    baseline, _ = read_points_csv(args.baseline)
    baseline_to_reference = similarity(baseline, reference, args.projections)
    _print_value('baseline_similarity', baseline_to_reference.value)
    _print_value('r_diff', resilience_diff(to_reference, baseline_to_reference))
    if args.poison is None:
        print('r_div\tundefined without a poison reference')
        return EXIT_OK
    poison, _ = read_points_csv(args.poison)
    division = resilience_div(
        to_reference,
        similarity(generated, poison, args.projections),
        baseline_to_reference,
        similarity(baseline, poison, args.projections),
    )
    _print_value('r_div', division.value)
    print(f'r_div_unstable\t{str(division.unstable).lower()}')
    return EXIT_OK


def _grid(args: argparse.Namespace) -> int:
    grid = load_grid_config(args.config)
    result = run_grid(grid, args.parallelism)
    result.write(args.out)
    print(result.aggregate().to_string(index=False, float_format=lambda value: FLOAT_FORMAT % value))
    logger.info('Wrote %d cells to %s.', len(result.results), args.out)
    return EXIT_OK


def _losscheck(args: argparse.Namespace) -> int:
    results = run_checks(args.seed)
    print(format_results(results))
    failed = [result.name for result in results if not result.passed]
    if failed:
        logger.error('%d of %d loss checks failed: %s.', len(failed), len(results), ', '.join(failed))
        return EXIT_FAILURE
    return EXIT_OK


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f'must be a positive integer, but got {value}')
    return number


def _build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog='huberdiff', description='Train diffusion models on corrupted data and measure their resilience.')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='log every training step')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='log warnings and errors only')
    subparsers = parser.add_subparsers(dest='command', required=True, parser_class=_ArgumentParser)

    train = subparsers.add_parser('train', help='train one run and measure it at every checkpoint')
    train.add_argument('--config', help='a JSON run configuration (defaults apply otherwise)')
    train.add_argument('--out', required=True, help='the directory to write checkpoints.csv and model.bin to')
    train.add_argument('--seed', type=int)
    train.add_argument('--steps', type=_positive_int)
    train.add_argument('--fraction', type=float)
    train.set_defaults(handler=_train)

    sample_parser = subparsers.add_parser('sample', help='draw points from a trained model')
    sample_parser.add_argument('--model', required=True, help='a model.bin written by train')
    sample_parser.add_argument('--out', required=True, help='the points CSV to write')
    sample_parser.add_argument('-n', type=_positive_int, default=1024, help='the number of points')
    sample_parser.add_argument('--steps', type=_positive_int, default=500, help='the number of integration steps')
    sample_parser.add_argument('--sampler', choices=[kind.value for kind in SamplerKind], default=SamplerKind.SDE.value)
    sample_parser.add_argument('--seed', type=int, default=0)
    sample_parser.add_argument('--beta-min', type=float, help='defaults to the config.json next to the model, if any')
    sample_parser.add_argument('--beta-max', type=float, help='defaults to the config.json next to the model, if any')
    sample_parser.set_defaults(handler=_sample)

    evaluate = subparsers.add_parser('evaluate', help='compare point sets')
    evaluate.add_argument('generated', help='the generated points CSV')
    evaluate.add_argument('reference', help='the clean reference points CSV')
    evaluate.add_argument('--baseline', help='points generated by a model trained on clean data')
    evaluate.add_argument('--poison', help='a reference drawn from the outlier distribution')
    evaluate.add_argument('--projections', type=_positive_int, default=256)
    evaluate.set_defaults(handler=_evaluate)

    grid = subparsers.add_parser('grid', help='run a full grid of runs')
    grid.add_argument('--config', default=str(BENCH_CONFIG_PATH), help='a JSON grid configuration (the benchmark grid by default)')
    grid.add_argument('--out', required=True, help='the directory to write the cell, summary and aggregate CSVs to')
    grid.add_argument('--parallelism', type=_positive_int, default=1, help='the number of cells to run at once')
    grid.set_defaults(handler=_grid)

    losscheck = subparsers.add_parser('losscheck', help='check the loss kernels, schedules and gradients')
    losscheck.add_argument('--seed', type=int, default=0)
    losscheck.set_defaults(handler=_losscheck)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as system_exit:
        return system_exit.code if isinstance(system_exit.code, int) else EXIT_USAGE

    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except (ConfigError, _UsageError, FileNotFoundError) as error:
        print(f'huberdiff {args.command}: error: {error}', file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, ValueError, OSError) as error:
        logger.error('%s failed: %s', args.command, error)
        return EXIT_FAILURE
