import os
import time

import numpy as np
from tabulate import tabulate

from config.settings import (
    AFFINE_SCALE_FILENAME, AFFINE_SHIFT_FILENAME, BLOCK_SPARSITY_GRID_STOP, COMP_STATS_FILENAME,
    CORRECTED_FILENAME, DATABASE_FILENAME, DENSE_STATS_FILENAME, GRIDS_FILENAME, LEDGER_FILENAME,
    REPORT_FILENAME, SPARSITY_GRID_STOP, VERIFY_MAX_COLS, VERIFY_MAX_ROWS, VERIFY_TOLERANCE,
    WEIGHTS_FILENAME, get_thread_count,
)
from services.allocator import (
    AllocationPlan, CompressionDatabase, apply_costs, build_database, default_levels, dp_allocate,
    measure_loss, sparsity_grid, stitch,
)
from services.baselines import (
    iterative_magnitude_reconstruct, magnitude_prune, magnitude_reconstruct, nearest_round,
    nm_magnitude_reconstruct,
)
from services.correction import apply_correction, collect_stats, merge_affine, stats_to_json
from services.hessian import compute_hessian
from services.oracle import naive_block_prune_row, naive_nm_prune_row, naive_obq_row, naive_prune_row
from services.quant_solver import grids_to_json, quantize_layer, sequential_reopt
from services.sparse_solver import (
    SparsityTarget, ledger_squared_error, ledgers_to_json, prune, prune_nm, prune_unstructured,
)
from services.tensor_io import (
    LayerProblem, load_inputs, load_json, load_layer_problem, load_matrix, save_json, save_matrix,
)
from utils.errors import NumericalError, UsageError
from utils.filename import get_unique_filename, replace_filename_tokens
from utils.run_log import log_run


def _print_table(rows, headers, silent=False):
    if not silent:
        print(tabulate(rows, headers=headers, tablefmt='grid'))


def _error_report(problem, compressed):
    """Squared output error, the dense output energy and their ratio."""
    squared_error = measure_loss(problem, compressed)
    dense_output = problem.weights @ problem.inputs
    dense_energy = float(np.sum(dense_output * dense_output))
    relative = squared_error / dense_energy if dense_energy > 0 else 0.0
    return squared_error, dense_energy, relative


def _check_close(expected, actual, what):
    atol = VERIFY_TOLERANCE * max(1.0, float(np.max(np.abs(expected))))
    if not np.allclose(expected, actual, rtol=0.0, atol=atol):
        diff = float(np.max(np.abs(expected - actual)))
        raise NumericalError(f"Verification failed for {what}: max abs diff {diff:.3e} > {atol:.3e}")


def _verify_allowed(problem, silent):
    if problem.d_col > VERIFY_MAX_COLS:
        if not silent:
            print(f"Warning: --verify skipped, d_col={problem.d_col} exceeds {VERIFY_MAX_COLS}")
        return False
    return True


def _verify_prune(problem, target, result, silent=False):
    if not _verify_allowed(problem, silent):
        return
    h = result.hessian
    rows = min(problem.d_row, VERIFY_MAX_ROWS)
    for i in range(rows):
        w = problem.weights[i]
        if target.kind == 'nm':
            _, _, expected = naive_nm_prune_row(w, h, target.n, target.m)
        elif target.kind == 'block':
            _, _, expected = naive_block_prune_row(w, h, target.block_size, result.counts[i])
        else:
            _, _, expected = naive_prune_row(w, h, result.counts[i])
        _check_close(expected, result.weights[i], f"row {i}")
    if not silent:
        print(f"Verified {rows} row(s) against the brute-force oracle")


def _verify_quantize(problem, result, outliers, silent=False):
    if not _verify_allowed(problem, silent):
        return
    rows = min(problem.d_row, VERIFY_MAX_ROWS)
    for i in range(rows):
        _, _, expected = naive_obq_row(problem.weights[i], result.hessian, result.grids[i], outliers)
        _check_close(expected, result.weights[i], f"row {i}")
    if not silent:
        print(f"Verified {rows} row(s) against the brute-force oracle")


def _build_target(args):
    if args.mode == 'nm':
        return SparsityTarget.nm(args.n, args.m)
    if args.mode == 'block':
        return SparsityTarget.block(args.block_size, args.sparsity)
    return SparsityTarget.unstructured(args.sparsity)


def handle_hessian_command(args):
    """Accumulate H = 2XX^T (+ damp) over every input file and save it."""
    h = compute_hessian(load_inputs(args.inputs), args.damp)
    save_matrix(h, args.out)
    if not args.silent:
        print(f"Hessian {h.shape[0]}x{h.shape[1]} from {len(args.inputs)} batch(es) saved to {args.out}")
    return {'output': args.out}


def handle_prune_command(args):
    """Prune one layer, write weights, ledger and report."""
    problem = load_layer_problem(args.weights, args.inputs)
    target = _build_target(args)
    threads = get_thread_count(args.threads)
    out_dir = replace_filename_tokens(args.out, {'layer': problem.name, 'mode': args.mode,
                                                 'sparsity': args.sparsity}, args.debug)

    result = prune(problem, target, args.damp, args.materialize, threads, args.compact,
                   silent=args.silent, debug=args.debug)
    if args.verify:
        _verify_prune(problem, target, result, args.silent)

    squared_error, dense_energy, relative = _error_report(problem, result.weights)
    zeros = int(np.count_nonzero(result.weights == 0))
    report = {
        "layer": problem.name,
        "mode": target.kind,
        "target": args.sparsity if target.kind != 'nm' else f"{target.n}:{target.m}",
        "shape": list(problem.weights.shape),
        "zeros": zeros,
        "sparsity": zeros / problem.weights.size,
        "damp": args.damp,
        "squared_error": squared_error,
        "relative_error": relative,
        "ledger_loss": result.ledger_loss(),
        "ledger_squared_error": ledger_squared_error(result.ledgers),
    }
    save_matrix(result.weights, os.path.join(out_dir, WEIGHTS_FILENAME))
    save_json(ledgers_to_json(result.ledgers, result.counts), os.path.join(out_dir, LEDGER_FILENAME))
    save_json(report, os.path.join(out_dir, REPORT_FILENAME))

    _print_table([
        ['Layer', problem.name],
        ['Mode', report['target'] if target.kind == 'nm' else f"{target.kind} {args.sparsity:.4f}"],
        ['Zeros', f"{zeros} / {problem.weights.size}"],
        ['Squared error', f"{squared_error:.6g}"],
        ['Relative error', f"{relative:.6g}"],
        ['Ledger loss', f"{report['ledger_loss']:.6g}"],
        ['Output', out_dir],
    ], ['Field', 'Value'], args.silent)
    return {'output': out_dir, 'target': report['target'], 'loss': squared_error, 'threads': threads}


def handle_quantize_command(args):
    """Quantize one layer with OBQ, write weights, grids, ledger and report."""
    problem = load_layer_problem(args.weights, args.inputs)
    threads = get_thread_count(args.threads)
    outliers = not args.no_outliers
    out_dir = replace_filename_tokens(args.out, {'layer': problem.name, 'bits': args.bits}, args.debug)

    result = quantize_layer(problem, args.bits, args.symmetric, args.damp, threads, outliers,
                            args.freeze_zeros, silent=args.silent, debug=args.debug)
    if args.verify:
        if args.freeze_zeros:
            if not args.silent:
                print("Warning: --verify does not cover --freeze-zeros; skipped")
        else:
            _verify_quantize(problem, result, outliers, args.silent)

    squared_error, dense_energy, relative = _error_report(problem, result.weights)
    report = {
        "layer": problem.name,
        "bits": args.bits,
        "symmetric": args.symmetric,
        "outliers": outliers,
        "freeze_zeros": args.freeze_zeros,
        "damp": args.damp,
        "squared_error": squared_error,
        "relative_error": relative,
        "ledger_loss": result.ledger_loss(),
    }
    save_matrix(result.weights, os.path.join(out_dir, WEIGHTS_FILENAME))
    save_json(grids_to_json(result.grids), os.path.join(out_dir, GRIDS_FILENAME))
    save_json(ledgers_to_json(result.ledgers), os.path.join(out_dir, LEDGER_FILENAME))
    save_json(report, os.path.join(out_dir, REPORT_FILENAME))

    _print_table([
        ['Layer', problem.name],
        ['Grid', f"{args.bits}-bit {'symmetric' if args.symmetric else 'asymmetric'}"],
        ['Squared error', f"{squared_error:.6g}"],
        ['Relative error', f"{relative:.6g}"],
        ['Output', out_dir],
    ], ['Field', 'Value'], args.silent)
    return {'output': out_dir, 'target': f"{args.bits}bit", 'loss': squared_error, 'threads': threads}


def handle_database_command(args):
    """Build the per-layer level database and its manifest."""
    problems = [load_layer_problem(w, x, name) for name, w, x in args.layer]
    threads = get_thread_count(args.threads)

    if args.no_sparsity:
        sparsities = []
    elif args.sparsities:
        sparsities = args.sparsities
    else:
        stop = args.grid_stop
        if stop is None:
            stop = BLOCK_SPARSITY_GRID_STOP if args.block_size else SPARSITY_GRID_STOP
        sparsities = sparsity_grid(args.grid_delta, stop)
    specs = default_levels(sparsities, args.nm, args.block_size, args.bits, args.joint_bits, args.symmetric)
    if args.debug:
        print(f"DEBUG: {len(specs)} level(s) per layer: {[s.label for s in specs]}")

    db = build_database(problems, specs, args.out, args.damp, args.act_bits, args.spatial, threads,
                        silent=args.silent, debug=args.debug)
    manifest_path = os.path.join(args.out, DATABASE_FILENAME)
    db.save(manifest_path)

    rows = [[layer.name, level.label, f"{level.loss:.6g}", f"{level.cost:.6g}"]
            for layer in db.layers for level in layer.levels]
    _print_table(rows, ['Layer', 'Level', 'Loss', 'Cost'], args.silent)
    return {'output': manifest_path, 'target': f"{len(specs) + 1} levels", 'threads': threads}


def handle_allocate_command(args):
    """Solve the budgeted level assignment and write the plan."""
    db = CompressionDatabase.load(args.db)
    if args.costs:
        apply_costs(db, load_json(args.costs))
    plan = dp_allocate(db, args.budget, args.resolution)
    out = get_unique_filename(args.out, args.overwrite, args.debug)
    save_json(plan.to_json(), out)

    rows = [[name, label, f"{db.layer(name).level(label).loss:.6g}", f"{db.layer(name).level(label).cost:.6g}"]
            for name, label in plan.choices.items()]
    rows.append(['TOTAL', '', f"{plan.total_loss:.6g}", f"{plan.total_cost:.6g}"])
    _print_table(rows, ['Layer', 'Level', 'Loss', 'Cost'], args.silent)
    if not args.silent:
        print(f"Plan saved to {out} (budget {args.budget:g})")
    return {'output': out, 'target': f"budget {args.budget:g}", 'loss': plan.total_loss}


def handle_stitch_command(args):
    """Copy the planned levels into one output directory."""
    db = CompressionDatabase.load(args.db)
    plan = AllocationPlan.from_json(load_json(args.plan))
    manifest = stitch(db, plan, args.out)
    _print_table([[e['name'], e['label'], e['weights'], e.get('grid', '')] for e in manifest['layers']],
                 ['Layer', 'Level', 'Weights', 'Grid'], args.silent)
    return {'output': args.out, 'loss': plan.total_loss}


def handle_eval_command(args):
    """Print the squared and relative output error of a compressed layer."""
    inputs = load_inputs(args.inputs)
    problem = LayerProblem(load_matrix(args.orig), inputs[0] if len(inputs) == 1 else np.hstack(inputs))
    squared_error, dense_energy, relative = _error_report(problem, load_matrix(args.comp))
    print(tabulate([[f"{squared_error:.10g}", f"{relative:.6g}"]],
                   headers=['Squared error', 'Relative error'], tablefmt='grid', disable_numparse=True))
    return {'loss': squared_error}


def handle_compare_command(args):
    """Squared error of ExactOBS/OBQ against the magnitude and rounding baselines."""
    problem = load_layer_problem(args.weights, args.inputs)
    threads = get_thread_count(args.threads)
    rows = []

    def add(method, weights):
        squared_error, _, relative = _error_report(problem, weights)
        rows.append([method, f"{squared_error:.6g}", f"{relative:.6g}"])

    target = SparsityTarget.unstructured(args.sparsity)
    exact = prune_unstructured(problem, target, args.damp, mode='recompute', threads=threads, silent=args.silent)
    add(f"ExactOBS {args.sparsity:.0%}", exact.weights)
    add(f"Magnitude + reconstruction x{args.steps}",
        iterative_magnitude_reconstruct(problem, args.sparsity, args.steps, args.damp))
    add("Magnitude + reconstruction", magnitude_reconstruct(problem, args.sparsity, args.damp))
    add("Magnitude", magnitude_prune(problem.weights, args.sparsity))

    if args.nm:
        n, m = args.nm
        add(f"ExactOBS {n}:{m}", prune_nm(problem, n, m, args.damp, threads).weights)
        add(f"Magnitude {n}:{m} + reconstruction", nm_magnitude_reconstruct(problem, n, m, args.damp))

    if args.bits:
        add(f"OBQ {args.bits}-bit",
            quantize_layer(problem, args.bits, args.symmetric, args.damp, threads, silent=args.silent).weights)
        add(f"Round-to-nearest {args.bits}-bit", nearest_round(problem.weights, args.bits, args.symmetric)[0])

    print(tabulate(rows, headers=['Method', 'Squared error', 'Relative error'], tablefmt='grid'))
    return {'target': f"{args.sparsity:g}", 'threads': threads}


def handle_reopt_command(args):
    """Refit a layer to dense outputs from inputs produced by compressed layers."""
    inputs = load_inputs(args.inputs)
    targets = load_inputs(args.targets)
    weights = sequential_reopt(inputs, targets, args.damp)
    save_matrix(weights, args.out)
    if not args.silent:
        print(f"Reoptimized {weights.shape[0]}x{weights.shape[1]} weights saved to {args.out}")
    return {'output': args.out}


def handle_correct_command(args):
    """Correct compressed outputs toward dense statistics, optionally merging into an affine map."""
    dense_outputs = load_matrix(args.dense)
    comp_outputs = load_matrix(args.comp)
    dense = collect_stats(dense_outputs)
    comp = collect_stats(comp_outputs)
    corrected = apply_correction(comp_outputs, dense, comp, args.textbook_correction)

    save_matrix(corrected, os.path.join(args.out, CORRECTED_FILENAME))
    save_json(stats_to_json({args.layer: dense}), os.path.join(args.out, DENSE_STATS_FILENAME))
    save_json(stats_to_json({args.layer: comp}), os.path.join(args.out, COMP_STATS_FILENAME))

    if args.affine_scale:
        scale = load_matrix(args.affine_scale).ravel()
        shift = load_matrix(args.affine_shift).ravel()
        new_scale, new_shift = merge_affine(dense, comp, scale, shift, args.textbook_correction)
        save_matrix(new_scale[None, :], os.path.join(args.out, AFFINE_SCALE_FILENAME))
        save_matrix(new_shift[None, :], os.path.join(args.out, AFFINE_SHIFT_FILENAME))

    after = collect_stats(corrected)
    std_gap = float(np.max(np.abs(after.std - dense.std) / dense.std))
    mean_gap = float(np.max(np.abs(after.mean - dense.mean)))
    _print_table([
        ['Channels', dense.channels],
        ['Form', 'textbook' if args.textbook_correction else 'default'],
        ['Max relative std gap', f"{std_gap:.3e}"],
        ['Max mean gap', f"{mean_gap:.3e}"],
        ['Output', args.out],
    ], ['Field', 'Value'], args.silent)
    return {'output': args.out}


COMMAND_HANDLERS = {
    'hessian': handle_hessian_command,
    'prune': handle_prune_command,
    'quantize': handle_quantize_command,
    'quant': handle_quantize_command,
    'database': handle_database_command,
    'db': handle_database_command,
    'allocate': handle_allocate_command,
    'stitch': handle_stitch_command,
    'eval': handle_eval_command,
    'compare': handle_compare_command,
    'reopt': handle_reopt_command,
    'correct': handle_correct_command,
}


def _command_inputs(args):
    for attr in ('weights', 'inputs', 'db', 'dense', 'orig', 'layer'):
        value = getattr(args, attr, None)
        if value:
            if attr == 'layer':
                return [name for name, _, _ in value]
            return value
    return ''


def handle_command(args):
    """
    Handle the command based on the parsed arguments and record the run.

    Args:
        args: Parsed command line arguments
    """
    handler = COMMAND_HANDLERS.get(args.command)
    if handler is None:
        raise UsageError(f"Unknown command: {args.command}")

    validate = getattr(args, 'validate', None)
    if validate is not None:
        validate(args)

    start_time = time.time()
    try:
        summary = handler(args) or {}
    except Exception as e:
        log_run(args.command, _command_inputs(args), getattr(args, 'out', None), time.time() - start_time,
                False, str(e), debug=args.debug, damp=getattr(args, 'damp', ''))
        raise
    log_run(args.command, _command_inputs(args), summary.pop('output', getattr(args, 'out', None)),
            time.time() - start_time, True, debug=args.debug, damp=getattr(args, 'damp', ''), **summary)
    return summary
