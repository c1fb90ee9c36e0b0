import argparse
import sys
import os

current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
sys.path.append(parent_dir)

from src.core.start import logger
from src.core.methods import cli_output
from src.core.schemas import RunOutput, ConfigError, BackboneConfig
from src.core.store import lookup_error, STATUS_MAP
from src.core import gradcheck
from src.custom.harness import load_config, run_experiment, pretrain, compare_runs, count_table, STRATEGIES
from src.custom.schemas import load_presets, resolve_backbone


def overrides_from(args) -> dict:
    return {
        'seed': args.seed
        , 'train.rounds': args.rounds
        , 'train.clients': args.clients
        , 'partition.clients': args.clients
        , 'train.clients_per_round': args.clients_per_round
        , 'partition.alpha': args.alpha
        , 'strategy': args.strategy
        , 'init': args.init
        , 'output_dir': args.output
    }


def guarded(func):
    """
    Maps failures that happen before a stage starts (unreadable or invalid config) onto a RunOutput.
    """
    def wrapper(args) -> RunOutput:
        try:
            return func(args)
        except Exception as e:
            error = lookup_error(e)
            logger.error(f"{error.logger_message}\nMethod: <{func.__name__}>\nMessage:\n\n {e}.\n")
            return RunOutput(data=None, status=error.status_code, message=f"{error.client_message} {e}")
    wrapper.__name__ = func.__name__
    return wrapper


@cli_output
@guarded
def cmd_pretrain(args) -> RunOutput:
    config = load_config(args.config, overrides_from(args))
    output = pretrain(config)
    if output.status == STATUS_MAP[0]:
        output.message = f"{output.message} Upstream accuracy {output.data['accuracy']:.4f}, saved to <{output.data['path']}>."
    return output


@cli_output
@guarded
def cmd_run(args) -> RunOutput:
    config = load_config(args.config, overrides_from(args))
    return run_experiment(config, workers=args.workers)


@cli_output
@guarded
def cmd_compare(args) -> RunOutput:
    comparison = compare_runs(args.runs, csv_path=args.csv, target_accuracy=args.target)
    return RunOutput(data=comparison.text, status=STATUS_MAP[0], message=f"Compared {len(args.runs)} runs.")


@cli_output
@guarded
def cmd_count(args) -> RunOutput:
    if args.config:
        backbone = load_config(args.config).backbone
    else:
        backbone = BackboneConfig(**resolve_backbone({'preset': args.preset}))
    if args.classes is not None:
        backbone = backbone.copy(update={'classes': args.classes})

    frame = count_table(backbone, clients_per_round=args.clients_per_round, rounds=args.rounds)
    return RunOutput(data=frame.to_string(index=False), status=STATUS_MAP[0],
                     message=f"Accounting for {backbone.layers} layers, d={backbone.dim}, C={backbone.classes}.")


@cli_output
@guarded
def cmd_gradcheck(args) -> RunOutput:
    frame = gradcheck.run_suite(seed=args.seed, names=args.cases or None)
    if frame.empty:
        raise ConfigError(f"No gradient case named {args.cases}.")
    failed = int((~frame['passed']).sum())
    status = STATUS_MAP[0] if failed == 0 else STATUS_MAP[2]
    return RunOutput(data=frame.to_string(index=False), status=status,
                     message=f"{len(frame) - failed} of {len(frame)} gradient checks passed.")


class CliParser(argparse.ArgumentParser):
    """
    Usage errors (missing `--seed`, unknown flags, bad choices) are configuration errors, so they exit
    with the configuration status instead of argparse's default 2.
    """

    def error(self, message):
        self.print_usage(sys.stderr)
        logger.error(f"Invalid command line: {message}")
        self.exit(STATUS_MAP[1], f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog='fedpeft', description='Federated parameter-efficient fine-tuning simulator.')
    commands = parser.add_subparsers(dest='command', required=True)

    def experiment_flags(sub, seed_required: bool):
        sub.add_argument('--config', required=True, help='YAML experiment file.')
        sub.add_argument('--seed', type=int, required=seed_required)
        sub.add_argument('--rounds', type=int)
        sub.add_argument('--clients', type=int)
        sub.add_argument('--clients-per-round', type=int)
        sub.add_argument('--alpha', type=float)
        sub.add_argument('--strategy', choices=sorted(STRATEGIES))
        sub.add_argument('--init', choices=['pretrained', 'scratch'])
        sub.add_argument('--output', help='Output directory.')

    pretrain_cmd = commands.add_parser('pretrain', help='Train the upstream checkpoint.')
    experiment_flags(pretrain_cmd, seed_required=False)
    pretrain_cmd.set_defaults(handler=cmd_pretrain)

    run_cmd = commands.add_parser('run', help='Run one federated experiment.')
    experiment_flags(run_cmd, seed_required=True)
    run_cmd.add_argument('--workers', type=int, default=1, help='Clients trained in parallel per round.')
    run_cmd.set_defaults(handler=cmd_run)

    compare_cmd = commands.add_parser('compare', help='Tabulate finished runs.')
    compare_cmd.add_argument('runs', nargs='+', help='Run directories or metrics files.')
    compare_cmd.add_argument('--csv', help='Also write the table as CSV.')
    compare_cmd.add_argument('--target', type=float, help='Target accuracy; defaults to each run\'s own.')
    compare_cmd.set_defaults(handler=cmd_compare)

    count_cmd = commands.add_parser('count', help='Parameter and cost accounting without training.')
    count_cmd.add_argument('--config')
    count_cmd.add_argument('--preset', default='vit_b16', choices=sorted(load_presets()))
    count_cmd.add_argument('--classes', type=int)
    count_cmd.add_argument('--clients-per-round', type=int, default=16)
    count_cmd.add_argument('--rounds', type=int, default=1)
    count_cmd.set_defaults(handler=cmd_count)

    gradcheck_cmd = commands.add_parser('gradcheck', help='Run the finite-difference suite.')
    gradcheck_cmd.add_argument('--seed', type=int, default=0)
    gradcheck_cmd.add_argument('--cases', nargs='*', help='Only these cases.')
    gradcheck_cmd.set_defaults(handler=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code or STATUS_MAP[0]
    return args.handler(args)


if __name__ == '__main__':
    sys.exit(main())
