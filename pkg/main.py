#!/usr/bin/env python3
"""
SPECTRE - Main Entry Point

Command-line front end for minimax-fair classification with spectral
uncertainty sets: toy data generation, tuning and training, error bounds,
evaluation, prediction and hyperparameter sweeps.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from config import ExperimentConfig
from modules.dataset import generate_toy
from modules.experiment import SpectreExperiment
from modules.mrc_core import MrcModel
from utils.errors import ConfigError, DataError, SpectreError
from utils.storage import atomic_write_text, dumps_json


def setup_logging(verbose: bool = False, log_file: Optional[str] = None):
    """Configure logging"""
    level = logging.DEBUG if verbose else logging.INFO
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def _float_list(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise ConfigError(f"Expected a comma-separated list of numbers, got '{text}'")


def _int_list(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise ConfigError(f"Expected a comma-separated list of integers, got '{text}'")


def load_config(config_path: Optional[str], overrides: Dict[str, Any]) -> ExperimentConfig:
    """File values, then environment, then command-line flags"""
    config = ExperimentConfig.from_yaml(config_path) if config_path else ExperimentConfig()
    return config.apply_env().with_overrides(overrides).validate()


def load_model(path: str) -> MrcModel:
    model_path = Path(path)
    if not model_path.exists():
        raise DataError(f"Model file not found: {model_path}")
    try:
        data = json.loads(model_path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise DataError(f"Model file {model_path} is not valid JSON: {e}")
    return MrcModel.from_dict(data)


def gen_toy_command(n: int, seed: int, out: str):
    """Write the toy dataset as CSV"""
    logger = logging.getLogger(__name__)
    ds = generate_toy(n, seed)
    path = atomic_write_text(Path(out), ds.to_csv(label_column='y', sensitive_column='s'))
    logger.info(f"Wrote {ds.n_samples} toy rows to {path}")


def tune_train_command(config: ExperimentConfig):
    """Tune, train, evaluate and bound"""
    logger = logging.getLogger(__name__)
    experiment = SpectreExperiment(config)
    report = experiment.run()

    logger.info("Run complete!")
    logger.info(f"sigma*={report.sigma_star}, lambda0*={report.lambda0_star}")
    logger.info(f"Artifacts: {experiment.store.summary()}")


def bounds_command(config: ExperimentConfig, model_path: str, data_path: Optional[str] = None):
    """Group and overall error bounds of a saved model"""
    logger = logging.getLogger(__name__)
    model = load_model(model_path)
    experiment = SpectreExperiment(config)
    section = experiment.bounds_for_model(model, data_path)

    at_model = section["at_model_lambda0"]
    for bound in at_model["groups"] + ([at_model["overall"]] if at_model["overall"] else []):
        logger.info(f"{bound['group']}: [{bound['lower']:.4f}, {bound['upper']:.4f}]")
    logger.info(f"Bounds written to {experiment.store.output_dir}")


def evaluate_command(config: ExperimentConfig, model_path: str, data_path: str, out: Optional[str] = None):
    """Metrics of a saved model on a labeled CSV"""
    logger = logging.getLogger(__name__)
    model = load_model(model_path)
    experiment = SpectreExperiment(config)
    metrics = experiment.evaluate_file(model, data_path)

    if out:
        path = atomic_write_text(Path(out), dumps_json(metrics) + "\n")
    else:
        path = experiment.store.write_json('metrics.json', metrics)
    logger.info(f"Accuracy {metrics['accuracy']:.4f}; metrics written to {path}")
    print(dumps_json(metrics))


def predict_command(config: ExperimentConfig, model_path: str, data_path: str, out: Optional[str] = None):
    """Labels and probabilities of a saved model on a CSV"""
    logger = logging.getLogger(__name__)
    model = load_model(model_path)
    experiment = SpectreExperiment(config)
    predictions = experiment.predict_file(model, data_path)

    if out:
        path = atomic_write_text(Path(out), predictions.to_csv(index=False, lineterminator="\n",
                                                               float_format="%.17g"))
    else:
        path = experiment.store.write_csv('predictions.csv', predictions)
    logger.info(f"Wrote {len(predictions)} predictions to {path}")


def sweep_command(config: ExperimentConfig, parameter: str, values: Optional[List[float]] = None,
                  seeds: Optional[List[int]] = None):
    """Test metrics across a sigma or lambda0 grid"""
    logger = logging.getLogger(__name__)
    experiment = SpectreExperiment(config)
    table = experiment.sweep(parameter, values=values, seeds=seeds)

    path = experiment.store.write_csv(f'sweep_{parameter}.csv', table)
    ok = table[~table['failed'].astype(bool)]
    if not ok.empty:
        summary = ok[['accuracy', 'worst_group_accuracy']].astype(float).groupby(ok['value']).median()
        logger.info(f"Median test metrics per {parameter}:\n{summary.to_string()}")
    logger.info(f"Sweep of {len(table)} cells written to {path}")


def _report_error(record: Dict[str, Any], output_dir: Optional[str]):
    """Machine-readable error record on stderr, and error.json when possible"""
    print(json.dumps(record), file=sys.stderr)
    if output_dir and Path(output_dir).is_dir():
        atomic_write_text(Path(output_dir) / 'error.json', dumps_json(record) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='SPECTRE - Minimax-fair classification with spectral uncertainty sets',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog='''
Examples:
  # Generate the two-group toy dataset
  python main.py gen-toy --n 1000 --seed 0 --out toy.csv

  # Tune sigma and lambda0, train, evaluate and compute bounds
  python main.py tune-train --config configs/toy.yaml

  # Same with a different selection strategy and seed
  python main.py tune-train --config configs/toy.yaml --strategy WCE_T_A --seed 3

  # Bounds of a saved model over a lambda0 grid
  python main.py bounds --config configs/toy.yaml --model output/model.json --lambda0-grid 0.1,0.5,1,5

  # Metrics of a saved model on a labeled CSV
  python main.py evaluate --model output/model.json --data output/train.csv

  # Predicted labels and probabilities
  python main.py predict --model output/model.json --data new_rows.csv --out predictions.csv

  # Sigma-effect sweep over 10 seeds
  python main.py sweep --config configs/toy.yaml --parameter sigma --seeds 0,1,2,3,4,5,6,7,8,9

Environment Variables:
  SPECTRE_OUTPUT_DIR    Output directory for artifacts (default: output)
  SPECTRE_MAX_WORKERS   Parallel candidate trainings and bound solves (default: 1)
  SPECTRE_SEED          Global seed (default: 0)

Exit Codes:
  0 success, 2 configuration or argument error, 3 data error, 4 solver failure, 1 unexpected error
        '''
    )

    parser.add_argument('-v', '--verbose', action='store_true',
                        help='Enable verbose logging')
    parser.add_argument('--log-file', type=str,
                        help='Also write logs to this file')

    subparsers = parser.add_subparsers(dest='command', help='Command to run')

    # Toy data command
    toy_parser = subparsers.add_parser('gen-toy', help='Write the toy dataset as CSV')
    toy_parser.add_argument('--n', type=int, default=1000, help='Number of rows (default: 1000)')
    toy_parser.add_argument('--seed', type=int, default=0, help='Sampling seed (default: 0)')
    toy_parser.add_argument('--out', type=str, default='toy.csv', help='Output CSV (default: toy.csv)')

    def add_config_args(sub):
        sub.add_argument('--config', type=str, help='YAML experiment configuration')
        sub.add_argument('--seed', type=int, help='Override the global seed')
        sub.add_argument('--output-dir', type=str, help='Override the output directory')
        sub.add_argument('--max-workers', type=int, help='Override the worker count')

    # Tune and train command
    train_parser = subparsers.add_parser('tune-train', help='Tune, train, evaluate and compute bounds')
    add_config_args(train_parser)
    train_parser.add_argument('--data', type=str, help='Train on this CSV instead of the configured data')
    train_parser.add_argument('--strategy', type=str, help='ACC, WCE, WCE_T_A or TOPN_WCE')
    train_parser.add_argument('--method', type=str, choices=['subgradient', 'lp'], help='Training solver')
    train_parser.add_argument('--repeats', type=int, help='Number of split seeds to average over')

    # Bounds command
    bounds_parser = subparsers.add_parser('bounds', help='Error bounds of a saved model')
    add_config_args(bounds_parser)
    bounds_parser.add_argument('--model', type=str, required=True, help='Model JSON from tune-train')
    bounds_parser.add_argument('--data', type=str, help='Audit CSV (default: audit subset of the training part)')
    bounds_parser.add_argument('--lambda0-grid', type=str, help='Comma-separated lambda0 values')
    bounds_parser.add_argument('--sigma-grid', type=str, help='Comma-separated sigma values')
    bounds_parser.add_argument('--no-group-bounds', action='store_true', help='Only compute overall bounds')

    # Evaluate command
    evaluate_parser = subparsers.add_parser('evaluate', help='Metrics of a saved model on a labeled CSV')
    add_config_args(evaluate_parser)
    evaluate_parser.add_argument('--model', type=str, required=True, help='Model JSON from tune-train')
    evaluate_parser.add_argument('--data', type=str, required=True, help='Labeled CSV')
    evaluate_parser.add_argument('--out', type=str, help='Metrics JSON (default: <output-dir>/metrics.json)')

    # Predict command
    predict_parser = subparsers.add_parser('predict', help='Predictions of a saved model')
    add_config_args(predict_parser)
    predict_parser.add_argument('--model', type=str, required=True, help='Model JSON from tune-train')
    predict_parser.add_argument('--data', type=str, required=True, help='CSV with the model feature columns')
    predict_parser.add_argument('--out', type=str, help='Predictions CSV (default: <output-dir>/predictions.csv)')

    # Sweep command
    sweep_parser = subparsers.add_parser('sweep', help='Test metrics across a sigma or lambda0 grid')
    add_config_args(sweep_parser)
    sweep_parser.add_argument('--parameter', type=str, required=True, choices=['sigma', 'lambda0'])
    sweep_parser.add_argument('--values', type=str, help='Comma-separated grid (default grids when omitted)')
    sweep_parser.add_argument('--seeds', type=str, help='Comma-separated data seeds')

    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = {
        'seed': getattr(args, 'seed', None),
        'output_dir': getattr(args, 'output_dir', None),
        'max_workers': getattr(args, 'max_workers', None),
    }
    if args.command == 'tune-train':
        overrides.update({
            'tune.strategy': args.strategy,
            'solver.method': args.method,
            'repeats': args.repeats,
        })
        if args.data:
            overrides.update({'data.source': 'csv', 'data.path': str(Path(args.data).resolve())})
    elif args.command == 'bounds':
        overrides.update({
            'bounds.lambda0_grid': _float_list(args.lambda0_grid),
            'bounds.sigma_grid': _float_list(args.sigma_grid),
            'bounds.group_bounds': False if args.no_group_bounds else None,
        })
    return overrides


def main(argv: Optional[List[str]] = None):
    """Main entry point"""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        sys.exit(1)

    # Setup logging
    setup_logging(args.verbose, args.log_file)
    logger = logging.getLogger(__name__)

    output_dir = None
    try:
        if args.command == 'gen-toy':
            gen_toy_command(args.n, args.seed, args.out)
            return

        config = load_config(args.config, _overrides(args))
        output_dir = config.output_dir
        logger.info(f"Configuration loaded: run id {config.fingerprint()}, output dir {config.output_dir}")

        if args.command == 'tune-train':
            tune_train_command(config)

        elif args.command == 'bounds':
            bounds_command(config, args.model, args.data)

        elif args.command == 'evaluate':
            evaluate_command(config, args.model, args.data, args.out)

        elif args.command == 'predict':
            predict_command(config, args.model, args.data, args.out)

        elif args.command == 'sweep':
            sweep_command(config, args.parameter, _float_list(args.values), _int_list(args.seeds))

        else:
            logger.error(f"Unknown command: {args.command}")
            sys.exit(1)

    except SpectreError as e:
        logger.error(f"{e.kind} in stage {e.stage or args.command}: {e}")
        record = e.to_record()
        record['stage'] = record['stage'] or args.command
        _report_error(record, output_dir)
        sys.exit(e.exit_code)

    except Exception as e:
        logger.error(f"Fatal error: {e}", exc_info=True)
        _report_error({'status': 'error', 'error': 'unexpected', 'stage': args.command, 'message': str(e)},
                      output_dir)
        sys.exit(1)


if __name__ == '__main__':
    main()
