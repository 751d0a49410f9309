"""Command line interface.

    uv run src/cli.py train --config configs/toy.json
    uv run src/cli.py eval runs/toy/checkpoint.pt --baseline base.json
    uv run src/cli.py predict runs/toy/checkpoint.pt image.png --fx 518.8 --fy 519.5
    uv run src/cli.py partition --set k_domains=3 --set z_min=1 --set z_max=13
    uv run src/cli.py figures runs/toy/checkpoint.pt --sweep-dir runs/toy/sweep_k
    uv run src/cli.py sweep-k --config configs/toy.json
    uv run src/cli.py ablate --config configs/toy.json

Exit codes: 0 success, 1 user error, 2 internal error.
"""
import argparse
import json
import logging
import os
import sys

from dotenv import load_dotenv

from depth_service import DepthService, checkpoint_run_config
from errors import CheckpointError, ConfigError
from run_config import RunConfig, ablation_matrix
from translator import Translator

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_INTERNAL_ERROR = 2

CHECKPOINT_COMMANDS = ('eval', 'figures', 'predict')


class ArgumentParser(argparse.ArgumentParser):
    """Argument parser exiting with the user error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER_ERROR, "%s: error: %s\n" % (self.prog, message))


def build_parser():
    parser = ArgumentParser(
        prog='rangedepth',
        description="Range domain aware metric depth estimation"
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help="Run config JSON file")
    common.add_argument(
        '--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
        help="Override a config value (JSON value syntax), repeatable"
    )
    common.add_argument('--seed', type=int, help="Override the config seed")
    common.add_argument('--device', help="Torch device, e.g. cpu or cuda")
    common.add_argument(
        '--log-level', default=os.environ.get('RANGEDEPTH_LOG_LEVEL', 'INFO'),
        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], help="Log level"
    )

    commands = parser.add_subparsers(dest='command', required=True)

    train = commands.add_parser('train', parents=[common], help="Train a model")
    train.add_argument('--resume', help="Checkpoint to continue from")

    evaluate = commands.add_parser('eval', parents=[common], help="Evaluate a checkpoint")
    evaluate.add_argument('checkpoint')
    evaluate.add_argument('--dataset', help="'synth' or dataset directory")
    evaluate.add_argument('--split', default='test', choices=['train', 'test', 'all'])
    evaluate.add_argument('--baseline', help="JSON report of the baseline for mRI")
    evaluate.add_argument('--output-dir', help="Report directory")

    predict = commands.add_parser('predict', parents=[common], help="Predict a depth map")
    predict.add_argument('checkpoint')
    predict.add_argument('image')
    predict.add_argument('--fx', type=float, help="Focal length x in pixels")
    predict.add_argument('--fy', type=float, help="Focal length y in pixels")
    predict.add_argument('--cx', type=float, help="Principal point x in pixels")
    predict.add_argument('--cy', type=float, help="Principal point y in pixels")
    predict.add_argument('--output-dir', default='.')

    commands.add_parser('partition', parents=[common], help="Print range domain tables")

    figures = commands.add_parser('figures', parents=[common], help="Emit figures and CSVs")
    figures.add_argument('checkpoint')
    figures.add_argument('--width-checkpoint', help="Width based model for occupancy comparison")
    figures.add_argument('--sweep-dir', help="Directory of K sweep runs")
    figures.add_argument('--images', type=int, default=2, help="Images per range domain")
    figures.add_argument('--frames', type=int, default=24, help="Frames of the RMSE sequence")
    figures.add_argument('--output-dir')

    sweep = commands.add_parser('sweep-k', parents=[common], help="Train and evaluate per K")
    sweep.add_argument('--k-values', type=int, nargs='+', default=[1, 2, 3, 4, 5, 6])
    sweep.add_argument('--uniform-k', type=int, default=4,
                       help="K of the uniform partition run, 0 to skip")
    sweep.add_argument('--output-dir')

    ablate = commands.add_parser('ablate', parents=[common], help="Run the ablation matrix")
    ablate.add_argument(
        '--rows', nargs='+', choices=[name for name, _ in ablation_matrix()],
        help="Ablation rows to run (baseline always runs)"
    )
    ablate.add_argument('--output-dir')
    return parser


def load_config(args):
    """Return RunConfig from --config, --set and --seed.

    Commands running from a checkpoint without --config get None, or the
    checkpoint's own run config when --set or --seed is given.
    """
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append('seed=%d' % args.seed)
    if args.config:
        return RunConfig.load(args.config, overrides)
    if args.command in CHECKPOINT_COMMANDS:
        if not overrides:
            return None
        return checkpoint_run_config(args.checkpoint).with_overrides(overrides)
    return RunConfig({}).with_overrides(overrides)


def format_partition(result):
    lines = [
        "z_min=%s z_max=%s K=%s" % (result['z_min'], result['z_max'], result['k_domains'])
    ]
    for strategy in ('space_increasing', 'uniform'):
        lines.append("")
        lines.append(strategy)
        lines.append("%3s  %-24s  %s" % ('k', 'interval', 'bucket'))
        for row in result[strategy]:
            lines.append("%3d  [%9.4f, %9.4f]  (%9.4f, %9.4f]" % (
                row['k'], row['interval'][0], row['interval'][1],
                row['bucket'][0], row['bucket'][1]
            ))
    return "\n".join(lines)


def run(args, service, config):
    if args.command == 'train':
        return service.train(config, args.resume)
    elif args.command == 'eval':
        return service.evaluate(
            args.checkpoint, config, args.dataset, args.split, args.baseline,
            args.output_dir
        )
    elif args.command == 'predict':
        return service.predict(
            args.checkpoint, args.image, args.fx, args.fy, args.cx, args.cy,
            args.output_dir, config
        )
    elif args.command == 'partition':
        return service.partition(config)
    elif args.command == 'figures':
        return service.figures(
            args.checkpoint, config, args.output_dir, args.width_checkpoint,
            args.sweep_dir, args.images, args.frames
        )
    elif args.command == 'sweep-k':
        return service.sweep_k(
            config, args.output_dir, tuple(args.k_values), args.uniform_k or None
        )
    elif args.command == 'ablate':
        return service.ablate(config, args.output_dir, args.rows)


def main(argv=None):
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    logger = logging.getLogger('rangedepth')
    translator = Translator(logger=logger)
    service = DepthService(logger, translator, args.device)

    try:
        config = load_config(args)
    except (ConfigError, CheckpointError) as e:
        details = getattr(e, 'details', None) or str(e)
        logger.error("%s: %s" % (e, details))
        key = "error.config_invalid"
        if isinstance(e, CheckpointError):
            key = "error.checkpoint_invalid"
        print(json.dumps({
            'error': translator.tr(key),
            'error_code': EXIT_USER_ERROR,
            'error_details': details
        }, indent=2), file=sys.stderr)
        return EXIT_USER_ERROR

    result = run(args, service, config)
    if 'error' in result:
        print(json.dumps(result, indent=2, default=str), file=sys.stderr)
        return result.get('error_code', EXIT_INTERNAL_ERROR)

    if args.command == 'partition':
        print(format_partition(result))
    else:
        print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
