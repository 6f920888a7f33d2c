"""
Per-layer compression database, budgeted level assignment and stitching.
"""
import math
import os
import shutil
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from config.settings import DP_MIN_RESOLUTION, DP_RESOLUTION, MANIFEST_FILENAME, SUPPORTED_BITS
from services.hessian import invert_spd
from services.quant_solver import fit_tensor_grid, grids_to_json, quantize_layer
from services.sparse_solver import (
    SparsityTarget, materialize, prune_block, prune_nm, prune_unstructured, select_global_mask,
)
from services.tensor_io import LayerProblem, load_json, save_json, save_matrix
from utils.errors import InfeasibleBudgetError, TensorFormatError, UsageError
from utils.filename import level_filename
from utils.parallel import run_parallel

IDENTITY_LABEL = "dense"


@dataclass
class Level:
    label: str
    weights: str
    loss: float
    cost: float
    grid: Optional[str] = None

    def to_dict(self):
        data = {"label": self.label, "weights": self.weights, "loss": self.loss, "cost": self.cost}
        if self.grid:
            data["grid"] = self.grid
        return data


@dataclass
class LayerLevels:
    name: str
    levels: List[Level] = field(default_factory=list)
    act_grid: Optional[dict] = None

    def level(self, label):
        for level in self.levels:
            if level.label == label:
                return level
        raise UsageError(f"Layer '{self.name}' has no level '{label}'")


@dataclass
class CompressionDatabase:
    """
    Per layer, every available compression level with its weights file,
    calibration loss and cost. Relative paths resolve against base_dir.
    """
    layers: List[LayerLevels]
    base_dir: str = "."

    def __post_init__(self):
        for layer in self.layers:
            if not layer.levels:
                raise TensorFormatError(f"Layer '{layer.name}' has no levels")
            for level in layer.levels:
                if not (math.isfinite(level.loss) and math.isfinite(level.cost)):
                    raise TensorFormatError(f"Layer '{layer.name}' level '{level.label}' has non-finite loss/cost")
                if level.loss < 0 or level.cost < 0:
                    raise TensorFormatError(f"Layer '{layer.name}' level '{level.label}' has negative loss/cost")

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise UsageError(f"Database has no layer '{name}'")

    def to_json(self):
        layers = []
        for layer in self.layers:
            entry = {"name": layer.name, "levels": [lv.to_dict() for lv in layer.levels]}
            if layer.act_grid:
                entry["act_grid"] = layer.act_grid
            layers.append(entry)
        return {"layers": layers}

    @classmethod
    def from_json(cls, data, base_dir="."):
        try:
            layers = [
                LayerLevels(
                    entry["name"],
                    [Level(lv["label"], lv["weights"], float(lv["loss"]), float(lv["cost"]), lv.get("grid"))
                     for lv in entry["levels"]],
                    entry.get("act_grid"),
                )
                for entry in data["layers"]
            ]
        except (KeyError, TypeError) as e:
            raise TensorFormatError(f"Malformed database manifest: missing {e}")
        for layer in layers:
            if not any(level.loss == 0.0 for level in layer.levels):
                raise TensorFormatError(f"Layer '{layer.name}' has no identity level with loss 0")
        return cls(layers, base_dir)

    @classmethod
    def load(cls, path):
        return cls.from_json(load_json(path), os.path.dirname(os.path.abspath(path)))

    def save(self, path):
        save_json(self.to_json(), path)


@dataclass
class AllocationPlan:
    choices: Dict[str, str]
    total_cost: float
    total_loss: float
    budget: Optional[float] = None

    def to_json(self):
        return {
            "choices": [{"layer": name, "label": label} for name, label in self.choices.items()],
            "total_cost": self.total_cost,
            "total_loss": self.total_loss,
            "budget": self.budget,
        }

    @classmethod
    def from_json(cls, data):
        try:
            choices = {c["layer"]: c["label"] for c in data["choices"]}
            return cls(choices, float(data["total_cost"]), float(data["total_loss"]), data.get("budget"))
        except (KeyError, TypeError) as e:
            raise TensorFormatError(f"Malformed plan: missing {e}")


def sparsity_grid(delta, stop):
    """
    Sparsity levels where each step keeps the fraction `delta` of the
    remaining weights: s_i = 1 - delta^i, for every s_i <= stop.
    The first value above stop ends the grid, so (0.9, 0.99) yields 43
    levels: 1 - 0.9^44 is already above 0.99.

    Args:
        delta (float): Fraction of remaining weights kept per level (0.9 prunes 10%)
        stop (float): Largest admissible sparsity

    Returns:
        list: Strictly increasing sparsities
    """
    if not 0.0 < delta < 1.0 or not 0.0 < stop < 1.0:
        raise UsageError(f"sparsity_grid needs 0 < delta, stop < 1 (got {delta}, {stop})")
    levels = []
    i = 1
    while True:
        s = 1.0 - delta ** i
        if s > stop:
            return levels
        levels.append(s)
        i += 1


def measure_loss(orig, compressed):
    """||WX - W_hat X||^2 over the layer's calibration inputs."""
    compressed = np.asarray(compressed, dtype=np.float64)
    if compressed.shape != orig.weights.shape:
        raise UsageError(f"Shape mismatch: {compressed.shape} vs {orig.weights.shape}")
    residual = (orig.weights - compressed) @ orig.inputs
    return float(np.sum(residual * residual))


def bop_cost(shape, weight_bits, act_bits, sparsity=0.0, spatial=1):
    """
    Bit-operations of a linear layer: FLOPs * weight bits * activation bits
    * density, with FLOPs = 2 * d_row * d_col * spatial.
    """
    d_row, d_col = shape
    for bits in (weight_bits, act_bits):
        if bits not in SUPPORTED_BITS:
            raise UsageError(f"Unsupported bit-width for BOPs: {bits}")
    if not 0.0 <= sparsity < 1.0:
        raise UsageError(f"Sparsity must be in [0, 1), got {sparsity}")
    flops = 2.0 * d_row * d_col * spatial
    return flops * weight_bits * act_bits * (1.0 - sparsity)


def apply_costs(db, costs):
    """
    Override level costs from a {layer: {label: cost}} table (e.g. measured timings).
    """
    for layer_name, table in costs.items():
        layer = db.layer(layer_name)
        for label, cost in table.items():
            cost = float(cost)
            if not math.isfinite(cost) or cost < 0:
                raise TensorFormatError(f"Invalid cost {cost} for {layer_name}/{label}")
            layer.level(label).cost = cost
    return db


def dp_allocate(db, budget, resolution=DP_RESOLUTION):
    """
    Pick one level per layer minimizing summed loss under a cost budget.

    Costs are rounded up to buckets of width budget/resolution; the result is
    optimal for those discretized costs and never exceeds the budget.

    Args:
        db (CompressionDatabase): Candidate levels
        budget (float): Cost budget
        resolution (int): Number of cost buckets (>= 100)

    Returns:
        AllocationPlan

    Raises:
        InfeasibleBudgetError: If no assignment fits
    """
    if resolution < DP_MIN_RESOLUTION:
        raise UsageError(f"Resolution must be at least {DP_MIN_RESOLUTION}, got {resolution}")
    if not budget > 0:
        raise InfeasibleBudgetError(f"Budget must be positive, got {budget}")
    width = budget / resolution

    # best[j]: minimal loss of the layers so far using exactly j buckets
    best = np.full(resolution + 1, np.inf)
    best[0] = 0.0
    choices = []
    for layer in db.layers:
        buckets = [int(math.ceil(level.cost / width - 1e-9)) for level in layer.levels]
        new_best = np.full(resolution + 1, np.inf)
        pick = np.full(resolution + 1, -1, dtype=np.int64)
        for li, (level, b) in enumerate(zip(layer.levels, buckets)):
            if b > resolution:
                continue
            shifted = np.full(resolution + 1, np.inf)
            shifted[b:] = best[:resolution + 1 - b] + level.loss
            better = shifted < new_best
            new_best[better] = shifted[better]
            pick[better] = li
        best = new_best
        choices.append((pick, buckets))

    if not np.isfinite(best).any():
        raise InfeasibleBudgetError(
            f"No level assignment fits the budget {budget} (after rounding costs up to {width:.6g})"
        )

    j = int(np.argmin(best))
    total_loss = float(best[j])
    plan = {}
    for layer, (pick, buckets) in zip(reversed(db.layers), reversed(choices)):
        li = int(pick[j])
        plan[layer.name] = layer.levels[li].label
        j -= buckets[li]
    plan = {layer.name: plan[layer.name] for layer in db.layers}
    total_cost = sum(db.layer(name).level(label).cost for name, label in plan.items())
    return AllocationPlan(plan, float(total_cost), total_loss, budget)


def stitch(db, plan, out_dir):
    """
    Copy each chosen level's weights (and grid) into out_dir and write a manifest.

    Returns:
        dict: The manifest that was written
    """
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for layer in db.layers:
        if layer.name not in plan.choices:
            raise UsageError(f"Plan has no choice for layer '{layer.name}'")
        level = layer.level(plan.choices[layer.name])
        source = db.resolve(level.weights)
        if not os.path.exists(source):
            raise FileNotFoundError(f"Missing weights file for {layer.name}/{level.label}: {source}")
        weights_name = level_filename(layer.name, level.label, ".npy")
        shutil.copyfile(source, os.path.join(out_dir, weights_name))
        entry = {"name": layer.name, "label": level.label, "weights": weights_name,
                 "loss": level.loss, "cost": level.cost}
        if level.grid:
            grid_source = db.resolve(level.grid)
            if not os.path.exists(grid_source):
                raise FileNotFoundError(f"Missing grid file for {layer.name}/{level.label}: {grid_source}")
            grid_name = level_filename(layer.name, level.label, ".grid.json")
            shutil.copyfile(grid_source, os.path.join(out_dir, grid_name))
            entry["grid"] = grid_name
        if layer.act_grid:
            entry["act_grid"] = layer.act_grid
        entries.append(entry)

    manifest = {"layers": entries, "total_cost": plan.total_cost, "total_loss": plan.total_loss}
    save_json(manifest, os.path.join(out_dir, MANIFEST_FILENAME))
    return manifest


@dataclass(frozen=True)
class LevelSpec:
    """
    One database level: a sparsity target (or none) and a bit-width (or none).
    """
    label: str
    target: Optional[SparsityTarget] = None
    bits: Optional[int] = None
    symmetric: bool = False


def default_levels(sparsities=(), nm_patterns=(), block_size=None, bits=(), joint_bits=None, symmetric=False):
    """
    Assemble level specs: unstructured (or block) sparsities, N:M patterns,
    pure bit-widths, and, with joint_bits, each sparsity level quantized.
    """
    specs = []
    for s in sparsities:
        target = SparsityTarget.block(block_size, s) if block_size else SparsityTarget.unstructured(s)
        tag = f"b{block_size}_" if block_size else ""
        specs.append(LevelSpec(f"{tag}s{s:.4f}", target))
    for n, m in nm_patterns:
        specs.append(LevelSpec(f"{n}:{m}", SparsityTarget.nm(n, m)))
    for b in bits:
        specs.append(LevelSpec(f"w{b}", None, b, symmetric))
    if joint_bits:
        for spec in list(specs):
            if spec.target is not None:
                specs.append(LevelSpec(f"{spec.label}_w{joint_bits}", spec.target, joint_bits, symmetric))
    return specs


def _level_cost(problem, spec, act_bits, spatial):
    if spec.target is None:
        sparsity = 0.0
    elif spec.target.kind == 'nm':
        sparsity = 1.0 - spec.target.n / spec.target.m
    else:
        sparsity = spec.target.sparsity
    return bop_cost(problem.weights.shape, spec.bits or 32, act_bits, sparsity, spatial)


def build_database(problems, specs, out_dir, damp=0.0, act_bits=32, spatial=1, threads=1,
                   act_symmetric=False, silent=True, debug=False):
    """
    Compress every layer at every level, measure the calibration loss and
    BOP cost, and write the weights plus a db.json manifest.

    Sparse levels of one layer share a single full-depth ExactOBS solve;
    joint levels quantize the pruned matrix with its zeros frozen.
    Below 32 activation bits each layer also records one grid fitted to
    its whole calibration input.

    Args:
        problems (list): LayerProblem per layer
        specs (list): LevelSpec per level
        out_dir (str): Output directory
        damp (str|float): Hessian dampening
        act_bits (int): Activation bit-width for BOPs and the input grid
        spatial (int): Spatial multiplier for unfolded convolutions
        threads (int): Worker count over (layer, level) pairs
        act_symmetric (bool): Symmetric activation grids
        silent (bool): Suppress progress output
        debug (bool): Print diagnostics

    Returns:
        CompressionDatabase
    """
    os.makedirs(out_dir, exist_ok=True)
    layers = []
    for problem in problems:
        dense_name = level_filename(problem.name, IDENTITY_LABEL, ".npy")
        save_matrix(problem.weights, os.path.join(out_dir, dense_name))
        levels = [Level(IDENTITY_LABEL, dense_name, 0.0, bop_cost(problem.weights.shape, 32, act_bits, 0.0, spatial))]

        # One full-depth unstructured solve feeds every unstructured level
        unstructured = [s for s in specs if s.target is not None and s.target.kind == 'unstructured']
        shared, shared_inv = None, None
        if unstructured:
            shared = prune_unstructured(problem, SparsityTarget.unstructured(0.0), damp,
                                        mode='recompute', threads=threads, silent=silent)
            shared_inv = invert_spd(shared.hessian)

        def compress(spec, problem=problem, shared=shared, shared_inv=shared_inv):
            if spec.target is None:
                weights = problem.weights
            elif spec.target.kind == 'unstructured':
                k = spec.target.pruned_count(problem.weights.size)
                counts = select_global_mask(shared.traces, k)
                weights = materialize(problem.weights, shared_inv, shared.traces, counts, 'recompute')
            elif spec.target.kind == 'nm':
                weights = prune_nm(problem, spec.target.n, spec.target.m, damp).weights
            else:
                weights = prune_block(problem, spec.target.block_size, spec.target.sparsity, damp,
                                      mode='recompute').weights
            grids = None
            if spec.bits:
                staged = LayerProblem(weights, problem.inputs, problem.name)
                result = quantize_layer(staged, spec.bits, spec.symmetric, damp,
                                        freeze_zeros=spec.target is not None)
                weights, grids = result.weights, result.grids
            return weights, grids

        results = run_parallel(compress, specs, threads, desc=f"Database {problem.name}", silent=silent)
        for spec, (weights, grids) in zip(specs, results):
            weights_name = level_filename(problem.name, spec.label, ".npy")
            save_matrix(weights, os.path.join(out_dir, weights_name))
            grid_name = None
            if grids is not None:
                grid_name = level_filename(problem.name, spec.label, ".grid.json")
                save_json(grids_to_json(grids), os.path.join(out_dir, grid_name))
            loss = measure_loss(problem, weights)
            levels.append(Level(spec.label, weights_name, loss, _level_cost(problem, spec, act_bits, spatial),
                                grid_name))
            if debug:
                print(f"DEBUG: {problem.name}/{spec.label}: loss {loss:.6g}")
        act_grid = None
        if act_bits < 32:
            grid = fit_tensor_grid(problem.inputs, act_bits, act_symmetric)
            act_grid = {**grid.to_dict(), "bits": grid.bits, "symmetric": grid.symmetric}
        layers.append(LayerLevels(problem.name, levels, act_grid))

    db = CompressionDatabase(layers, out_dir)
    return db
