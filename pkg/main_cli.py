#!/usr/bin/env python3
"""
julia-tc - CLI Entry Point
"""

import argparse
import sys

from cli.app import run_command, EXIT_INTERRUPTED


def add_train_arguments(parser: argparse.ArgumentParser):
    """Hyperparameter flags shared by train and sweep. Unset flags stay None."""
    group = parser.add_argument_group('training')
    group.add_argument('--lr', type=float, help='Learning rate of both blocks (default: 0.005)')
    group.add_argument('--lr-linear', type=float, help='Learning rate of the CP block')
    group.add_argument('--lr-nonlinear', type=float, help='Learning rate of the nonlinear head')
    group.add_argument('--batch-size', type=int, help='Mini-batch size (default: 1024)')
    group.add_argument('--warmstart-epochs', type=int, help='CP-only warm start epochs (default: 5)')
    group.add_argument('--ao-max-iters', type=int, help='Maximum AO iterations (default: 20)')
    group.add_argument('--ao-epochs-per-block', type=int, help='Epochs per block and AO iteration (default: 1)')
    group.add_argument('--max-epochs', type=int, help='Maximum refinement epochs (default: 1000)')
    group.add_argument('--early-stop-rel-tol', type=float, help='Relative validation-loss change that stops training (default: 1e-4)')
    group.add_argument('--patience', type=int, help='Consecutive epochs below tolerance before stopping (default: 1)')
    group.add_argument('--max-restarts', type=int, help='Restarts after a run with RFE >= 1 (default: 10)')
    group.add_argument('--train-frac', type=float, help='Fraction of entries used for training (default: 0.8)')
    group.add_argument('--val-frac', type=float, help='Fraction of the training part held out for validation (default: 0.1)')
    group.add_argument('--activation', choices=['relu', 'identity'], help='Head activation (default: relu)')
    group.add_argument('--optimizer', choices=['adam', 'sgd'], help='Refinement optimizer (default: adam)')
    group.add_argument('--init', choices=['ao', 'naive'], help='AO initialization or naive random init (default: ao)')
    group.add_argument('--workers', type=int, help='Threads for loss evaluation (default: 1)')
    group.add_argument('--nondeterministic', action='store_false', dest='deterministic', default=None,
                       help='Allow completion-order reductions and write wall-clock timings')


def add_data_arguments(parser: argparse.ArgumentParser):
    parser.add_argument('--one-based', action='store_true', default=None, help='Indices in files start at 1')
    parser.add_argument('--aggregate', choices=['mean', 'sum'], help='Merge duplicate indices instead of rejecting them')


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, help='JSON config file with the same keys as the flags')
    common.add_argument('--verbose', action='store_true', help='Log every epoch')
    common.add_argument('--log-dir', type=str, default='logs', help='Directory of the run log (default: logs)')
    common.add_argument('--no-log-file', action='store_true', help='Do not write a log file')

    parser = argparse.ArgumentParser(
        description="julia-tc - Sparse tensor completion with a CP block and a gated neural head",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s synth --shape 100,100,100 --r-true 3 --f-true 10 --missing 0.8 --seed 1 --out dir/
  %(prog)s train --data dir/data.coo --rank-split 3/10 --lr 0.005 --seed 1 --out run/
  %(prog)s impute --model run/model.ckpt.json --queries queries.txt --out values.txt
  %(prog)s eval --model run/model.ckpt.json --data heldout.coo --align dir/truth.ckpt.json
  %(prog)s sweep --data dir/data.coo --splits 4/16,10/10,16/4 --seeds 1,2,3 --jobs 3
        """
    )
    parser.add_argument('-v', '--version', action='version', version='%(prog)s 1.0.0')
    sub = parser.add_subparsers(dest='command', required=True)

    synth = sub.add_parser('synth', parents=[common], help='Generate a synthetic tensor and its ground truth')
    synth.add_argument('--shape', type=str, help='Dimensions, e.g. 100,100,100')
    synth.add_argument('--r-true', type=int, help='Multi-linear rank of the truth')
    synth.add_argument('--f-true', type=int, help='Nonlinear rank of the truth')
    synth.add_argument('--missing', type=float, help='Fraction of cells left unobserved (default: 0.8)')
    synth.add_argument('--noise', type=float, help='Gaussian noise std (default: 0)')
    synth.add_argument('--activation', choices=['relu', 'identity'], help='Activation of the true head')
    synth.add_argument('--seed', type=int, help='Random seed (required)')
    synth.add_argument('--out', type=str, help='Output directory')

    train = sub.add_parser('train', parents=[common], help='Train JULIA(R/F) on a COO file')
    train.add_argument('--data', type=str, help='COO input file')
    train.add_argument('--rank-split', type=str, help='R/F, e.g. 3/10')
    train.add_argument('--shape', type=str, help='Override the tensor shape')
    train.add_argument('--split', type=str, help='Reuse a saved split manifest')
    train.add_argument('--seed', type=int, help='Random seed (required)')
    train.add_argument('--out', type=str, help='Output directory (default: run)')
    add_data_arguments(train)
    add_train_arguments(train)

    impute = sub.add_parser('impute', parents=[common], help='Predict values at query indices')
    impute.add_argument('--model', type=str, help='Checkpoint file')
    impute.add_argument('--queries', type=str, help='File of index tuples, one per line')
    impute.add_argument('--out', type=str, help='Output file (default: stdout)')
    impute.add_argument('--one-based', action='store_true', default=None, help='Indices start at 1')

    evaluate = sub.add_parser('eval', parents=[common], help='Score a checkpoint on held-out entries')
    evaluate.add_argument('--model', type=str, help='Checkpoint file')
    evaluate.add_argument('--data', type=str, help='Held-out COO file')
    evaluate.add_argument('--align', type=str, help='Reference checkpoint for component alignment')
    evaluate.add_argument('--out', type=str, help='Metrics JSON file (default: stdout)')
    add_data_arguments(evaluate)

    sweep = sub.add_parser('sweep', parents=[common], help='Train a grid of rank splits and seeds')
    sweep.add_argument('--data', type=str, help='COO input file')
    sweep.add_argument('--splits', type=str, help='Rank splits, e.g. 4/16,10/10,16/4')
    sweep.add_argument('--seeds', type=str, help='Seeds, e.g. 1,2,3 (default: --seed)')
    sweep.add_argument('--seed', type=int, help='Single seed when --seeds is absent')
    sweep.add_argument('--jobs', type=int, help='Cells trained in parallel (default: 1)')
    sweep.add_argument('--out', type=str, help='Results CSV (default: sweep.csv)')
    add_data_arguments(sweep)
    add_train_arguments(sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    flags = vars(args).copy()
    command = flags.pop('command')
    config_path = flags.pop('config')
    verbose = flags.pop('verbose')
    log_dir = flags.pop('log_dir')
    log_file = not flags.pop('no_log_file')

    try:
        return run_command(command, flags, config_path, log_dir=log_dir, log_file=log_file, verbose=verbose)
    except KeyboardInterrupt:
        print("\n\nInterrupted by user.")
        return EXIT_INTERRUPTED


if __name__ == '__main__':
    sys.exit(main())
