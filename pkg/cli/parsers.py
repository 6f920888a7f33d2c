import argparse
import sys

from config.settings import (
    BLOCK_SPARSITY_GRID_STOP, DEFAULT_DAMP, DP_RESOLUTION, EXIT_USAGE, SPARSITY_GRID_DELTA,
    SPARSITY_GRID_STOP,
)
from utils.errors import UsageError


class CliArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that exits with the usage exit code instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"Error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _nm_pattern(value):
    try:
        n, m = (int(v) for v in value.split(':'))
    except ValueError:
        raise argparse.ArgumentTypeError(f"Invalid N:M pattern '{value}' (e.g. 2:4)")
    return n, m


def _layer_spec(value):
    parts = value.split(':')
    if len(parts) != 3 or not all(parts):
        raise argparse.ArgumentTypeError(f"Invalid layer '{value}' (use NAME:WEIGHTS.npy:INPUTS.npy)")
    return tuple(parts)


def _common_args():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-d', '--debug', action='store_true',
                        help='Show debug information and tracebacks')
    common.add_argument('-silent', '--silent', action='store_true',
                        help='Minimize output messages')
    common.add_argument('--threads', type=int,
                        help='Row worker count (default: OBC_THREADS or all cores)')
    return common


def _add_damp(p):
    p.add_argument('--damp', default=DEFAULT_DAMP,
                   help="Hessian dampening: 'auto' (1%% of the mean diagonal) or an absolute value (default: auto)")


def create_parser():
    """
    Create the main argument parser with all subcommands and their arguments.
    """
    parser = CliArgumentParser(description='obc - exact layer-wise pruning and quantization')
    subparsers = parser.add_subparsers(dest='command', help='Command to execute')
    common = _common_args()

    # Hessian command
    hessian_parser = subparsers.add_parser('hessian', parents=[common], help='Accumulate H = 2XX^T from input batches')
    hessian_parser.add_argument('-i', '--inputs', nargs='+', required=True, help='Calibration input files (d_col x N each)')
    _add_damp(hessian_parser)
    hessian_parser.add_argument('-o', '--out', required=True, help='Output NPY file for H')

    # Prune command
    prune_parser = subparsers.add_parser('prune', parents=[common], help='Prune a layer with ExactOBS')
    prune_parser.add_argument('-w', '--weights', required=True, help='Weight matrix (d_row x d_col)')
    prune_parser.add_argument('-i', '--inputs', nargs='+', required=True, help='Calibration input files (d_col x N each)')
    prune_parser.add_argument('--mode', choices=['unstructured', 'nm', 'block'], default='unstructured',
                              help='Sparsity structure (default: unstructured)')
    prune_parser.add_argument('-s', '--sparsity', type=float, help='Target sparsity in [0, 1) (unstructured/block)')
    prune_parser.add_argument('--n', type=int, help='Nonzeros per block (nm mode)')
    prune_parser.add_argument('--m', type=int, help='Block length (nm mode)')
    prune_parser.add_argument('--block-size', type=int, help='Block size c (block mode)')
    prune_parser.add_argument('--materialize', choices=['trace', 'recompute'], default='trace',
                              help='Keep row snapshots (trace) or rebuild rows with group OBS (recompute)')
    prune_parser.add_argument('--compact', action='store_true', help='Solve already-sparse rows on their nonzero support (unstructured mode)')
    prune_parser.add_argument('--verify', action='store_true', help='Check the result against the brute-force oracle (small layers)')
    _add_damp(prune_parser)
    prune_parser.add_argument('-o', '--out', required=True,
                              help='Output directory. Supports tokens: {layer}, {mode}, {sparsity}, {date}, {time}, {datetime}')

    def prune_command_validate(args):
        if args.mode == 'nm':
            if args.n is None or args.m is None:
                raise UsageError('--mode nm needs both --n and --m')
            if args.sparsity is not None or args.block_size is not None:
                raise UsageError('--sparsity and --block-size do not apply to --mode nm')
        else:
            if args.n is not None or args.m is not None:
                raise UsageError('--n/--m are only valid with --mode nm')
            if args.sparsity is None:
                raise UsageError(f'--mode {args.mode} needs --sparsity')
        if args.mode == 'block' and args.block_size is None:
            raise UsageError('--mode block needs --block-size')
        if args.mode == 'unstructured' and args.block_size is not None:
            raise UsageError('--block-size is only valid with --mode block')
        if args.compact and args.mode != 'unstructured':
            raise UsageError('--compact is only valid with --mode unstructured')
    prune_parser.set_defaults(validate=prune_command_validate)

    # Quantize command
    quantize_parser = subparsers.add_parser('quantize', aliases=['quant'], parents=[common], help='Quantize a layer with OBQ')
    quantize_parser.add_argument('-w', '--weights', required=True, help='Weight matrix (d_row x d_col)')
    quantize_parser.add_argument('-i', '--inputs', nargs='+', required=True, help='Calibration input files (d_col x N each)')
    quantize_parser.add_argument('-b', '--bits', type=int, required=True, help='Bit-width (2-32)')
    grid_group = quantize_parser.add_mutually_exclusive_group()
    grid_group.add_argument('--symmetric', dest='symmetric', action='store_true', help='Symmetric per-row grids')
    grid_group.add_argument('--asymmetric', dest='symmetric', action='store_false', help='Asymmetric per-row grids (default)')
    quantize_parser.set_defaults(symmetric=False)
    quantize_parser.add_argument('--no-outliers', action='store_true', help='Disable the outlier-first rule')
    quantize_parser.add_argument('--freeze-zeros', action='store_true', help='Keep zeros of an already pruned matrix fixed')
    quantize_parser.add_argument('--verify', action='store_true', help='Check the result against the brute-force oracle (small layers)')
    _add_damp(quantize_parser)
    quantize_parser.add_argument('-o', '--out', required=True,
                                 help='Output directory. Supports tokens: {layer}, {bits}, {date}, {time}, {datetime}')

    # Database command
    database_parser = subparsers.add_parser('database', aliases=['db'], parents=[common],
                                            help='Compress layers at every level and write a database manifest')
    database_parser.add_argument('-l', '--layer', type=_layer_spec, action='append', required=True,
                                 help='Layer as NAME:WEIGHTS.npy:INPUTS.npy (repeatable)')
    database_parser.add_argument('--sparsities', type=float, nargs='+',
                                 help='Explicit sparsity levels (default: the geometric grid)')
    database_parser.add_argument('--grid-delta', type=float, default=SPARSITY_GRID_DELTA,
                                 help=f'Fraction of remaining weights kept per grid level (default: {SPARSITY_GRID_DELTA})')
    database_parser.add_argument('--grid-stop', type=float,
                                 help=f'Largest grid sparsity (default: {SPARSITY_GRID_STOP}, {BLOCK_SPARSITY_GRID_STOP} with --block-size)')
    database_parser.add_argument('--no-sparsity', action='store_true', help='Skip sparsity levels')
    database_parser.add_argument('--block-size', type=int, help='Use block sparsity with this block size')
    database_parser.add_argument('--nm', type=_nm_pattern, nargs='+', default=[], help='N:M patterns, e.g. 2:4 4:8')
    database_parser.add_argument('--bits', type=int, nargs='+', default=[], help='Pure quantization levels')
    database_parser.add_argument('--joint-bits', type=int, help='Also quantize every sparse level to this bit-width')
    database_parser.add_argument('--symmetric', action='store_true', help='Symmetric quantization grids')
    database_parser.add_argument('--act-bits', type=int, default=32, help='Activation bit-width for BOP costs; below 32 an input grid is fitted per layer (default: 32)')
    database_parser.add_argument('--spatial', type=int, default=1, help='Spatial multiplier for BOP costs (default: 1)')
    _add_damp(database_parser)
    database_parser.add_argument('-o', '--out', required=True, help='Output directory for level weights and db.json')

    # Allocate command
    allocate_parser = subparsers.add_parser('allocate', parents=[common], help='Choose one level per layer under a budget')
    allocate_parser.add_argument('--db', required=True, help='Database manifest (db.json)')
    allocate_parser.add_argument('--budget', type=float, required=True, help='Total cost budget')
    allocate_parser.add_argument('--costs', help='Costs JSON {layer: {label: cost}} overriding manifest costs')
    allocate_parser.add_argument('--resolution', type=int, default=DP_RESOLUTION,
                                 help=f'Cost buckets for the DP (default: {DP_RESOLUTION})')
    allocate_parser.add_argument('-o', '--out', required=True, help='Output plan JSON')
    allocate_parser.add_argument('-ow', '--overwrite', action='store_true',
                                 help='Overwrite an existing plan instead of adding number suffix')

    # Stitch command
    stitch_parser = subparsers.add_parser('stitch', parents=[common], help='Assemble the chosen levels of a plan')
    stitch_parser.add_argument('--db', required=True, help='Database manifest (db.json)')
    stitch_parser.add_argument('--plan', required=True, help='Plan JSON from allocate')
    stitch_parser.add_argument('-o', '--out', required=True, help='Output directory')

    # Eval command
    eval_parser = subparsers.add_parser('eval', parents=[common], help='Squared output error of a compressed layer')
    eval_parser.add_argument('--orig', required=True, help='Original weights')
    eval_parser.add_argument('--comp', required=True, help='Compressed weights')
    eval_parser.add_argument('-i', '--inputs', nargs='+', required=True, help='Calibration input files')

    # Compare command
    compare_parser = subparsers.add_parser('compare', parents=[common], help='Squared error of ExactOBS/OBQ versus baselines')
    compare_parser.add_argument('-w', '--weights', required=True, help='Weight matrix')
    compare_parser.add_argument('-i', '--inputs', nargs='+', required=True, help='Calibration input files')
    compare_parser.add_argument('-s', '--sparsity', type=float, default=0.5, help='Unstructured sparsity (default: 0.5)')
    compare_parser.add_argument('--steps', type=int, default=4,
                                help='Rounds for iterative magnitude pruning + reconstruction (default: 4)')
    compare_parser.add_argument('--nm', type=_nm_pattern, help='Also compare an N:M pattern, e.g. 2:4')
    compare_parser.add_argument('-b', '--bits', type=int, help='Also compare OBQ with round-to-nearest at this bit-width')
    compare_parser.add_argument('--symmetric', action='store_true', help='Symmetric grids for --bits')
    _add_damp(compare_parser)

    # Reopt command
    reopt_parser = subparsers.add_parser('reopt', parents=[common],
                                         help='Least-squares weights for inputs from already compressed layers')
    reopt_parser.add_argument('-i', '--inputs', nargs='+', required=True, help='Compressed-model input batches X')
    reopt_parser.add_argument('-t', '--targets', nargs='+', required=True, help='Dense layer output batches Y (same order)')
    reopt_parser.add_argument('--damp', default='0', help='Dampening added to 2XX^T (default: 0)')
    reopt_parser.add_argument('-o', '--out', required=True, help='Output weights NPY')

    # Correct command
    correct_parser = subparsers.add_parser('correct', parents=[common],
                                           help='Mean/variance correction of compressed layer outputs')
    correct_parser.add_argument('--dense', required=True, help='Dense layer outputs (channels x samples)')
    correct_parser.add_argument('--comp', required=True, help='Compressed layer outputs (channels x samples)')
    correct_parser.add_argument('--layer', default='layer', help='Layer name used in the stats JSON')
    correct_parser.add_argument('--affine-scale', help='Per-channel scale of a following affine map (NPY, 1 x channels)')
    correct_parser.add_argument('--affine-shift', help='Per-channel shift of a following affine map (NPY, 1 x channels)')
    correct_parser.add_argument('--textbook-correction', action='store_true',
                                help='Use (std_d/std_c)(X - mean_c) + mean_d instead of the default form')
    correct_parser.add_argument('-o', '--out', required=True, help='Output directory')

    def correct_command_validate(args):
        if (args.affine_scale is None) != (args.affine_shift is None):
            raise UsageError('--affine-scale and --affine-shift must be given together')
    correct_parser.set_defaults(validate=correct_command_validate)

    return parser
