import os

import numpy as np
import pytest

from services.allocator import (
    IDENTITY_LABEL, AllocationPlan, CompressionDatabase, LayerLevels, Level, apply_costs, bop_cost,
    build_database, default_levels, dp_allocate, measure_loss, sparsity_grid, stitch,
)
from services.oracle import exhaustive_allocate
from services.quant_solver import QuantGrid, fit_tensor_grid, quantize_value
from services.sparse_solver import SparsityTarget, prune_unstructured
from services.tensor_io import LayerProblem, load_json, load_matrix, save_matrix
from utils.errors import InfeasibleBudgetError, TensorFormatError, UsageError


def make_db(table):
    """{layer: [(loss, cost), ...]} -> database with labels '<layer><i>'."""
    return CompressionDatabase([
        LayerLevels(name, [Level(f"{name}{i}", f"{name}{i}.npy", loss, cost) for i, (loss, cost) in enumerate(levels)])
        for name, levels in table.items()
    ])


def test_sparsity_grid_first_levels():
    grid = sparsity_grid(0.9, 0.3)
    assert grid == pytest.approx([0.1, 0.19, 0.271])


def test_sparsity_grid_immediate_stop():
    assert sparsity_grid(0.9, 0.05) == []


def test_sparsity_grid_default_range():
    grid = sparsity_grid(0.9, 0.99)
    assert len(grid) == 43
    assert all(a < b for a, b in zip(grid, grid[1:]))
    assert grid[-1] <= 0.99


def test_sparsity_grid_rejects_bad_arguments():
    with pytest.raises(UsageError):
        sparsity_grid(1.0, 0.5)
    with pytest.raises(UsageError):
        sparsity_grid(0.9, 0.0)


def test_measure_loss_examples(rng):
    w = rng.standard_normal((3, 4))
    problem = LayerProblem(w, np.eye(4))
    assert measure_loss(problem, w) == 0.0
    assert measure_loss(problem, np.zeros((3, 4))) == pytest.approx(np.sum(w ** 2))


def test_measure_loss_matches_loops(rng):
    problem = LayerProblem(rng.standard_normal((2, 3)), rng.standard_normal((3, 5)))
    compressed = rng.standard_normal((2, 3))
    expected = 0.0
    for i in range(2):
        for n in range(5):
            diff = sum((problem.weights[i, j] - compressed[i, j]) * problem.inputs[j, n] for j in range(3))
            expected += diff * diff
    assert measure_loss(problem, compressed) == pytest.approx(expected, rel=1e-10)


def test_measure_loss_shape_mismatch(rng):
    with pytest.raises(UsageError):
        measure_loss(LayerProblem(np.ones((2, 2)), np.eye(2)), np.ones((2, 3)))


def test_bop_cost_dense_32_bit():
    assert bop_cost((4, 8), 32, 32) == 2 * 4 * 8 * 1024


def test_bop_cost_ratio():
    shape = (16, 64)
    assert bop_cost(shape, 8, 8, 0.5) / bop_cost(shape, 32, 32) == pytest.approx(1 / 32)


def test_bop_cost_edges():
    assert bop_cost((4, 4), 32, 32, 0.999) == pytest.approx(0.001 * bop_cost((4, 4), 32, 32))
    assert bop_cost((4, 4), 8, 8, spatial=9) == 9 * bop_cost((4, 4), 8, 8)
    with pytest.raises(UsageError):
        bop_cost((4, 4), 32, 32, 1.0)
    with pytest.raises(UsageError):
        bop_cost((4, 4), 1, 32)


def test_dp_single_layer():
    db = make_db({"a": [(0.0, 10.0), (1.0, 6.0), (3.0, 2.0)]})
    plan = dp_allocate(db, 7.0)
    assert plan.choices == {"a": "a1"}
    assert plan.total_loss == 1.0
    assert plan.total_cost == 6.0


def test_dp_two_layer_example():
    db = make_db({"a": [(0.0, 10.0), (4.0, 5.0)], "b": [(0.0, 8.0), (1.0, 2.0)]})
    plan = dp_allocate(db, 12.0, resolution=120)
    assert plan.choices == {"a": "a0", "b": "b1"}
    assert plan.total_loss == 1.0
    assert plan.total_cost == 12.0


def test_dp_rounding_can_make_tight_budget_infeasible():
    db = make_db({"a": [(0.0, 10.0), (4.0, 5.0)], "b": [(0.0, 8.0), (1.0, 2.0)]})
    plan = dp_allocate(db, 12.0)
    assert plan.total_cost <= 12.0
    assert plan.choices == {"a": "a1", "b": "b1"}


def test_dp_generous_budget_picks_identity():
    db = make_db({"a": [(0.0, 10.0), (4.0, 5.0)], "b": [(0.0, 8.0), (1.0, 2.0)], "c": [(2.0, 1.0), (0.0, 3.0)]})
    plan = dp_allocate(db, 22.0)
    assert plan.choices == {"a": "a0", "b": "b0", "c": "c1"}
    assert plan.total_loss == 0.0


def test_dp_infeasible_budget():
    db = make_db({"a": [(0.0, 10.0), (4.0, 5.0)]})
    with pytest.raises(InfeasibleBudgetError):
        dp_allocate(db, 4.0)
    with pytest.raises(InfeasibleBudgetError):
        dp_allocate(db, 0.0)


def test_dp_resolution_floor():
    with pytest.raises(UsageError):
        dp_allocate(make_db({"a": [(0.0, 1.0)]}), 1.0, resolution=99)


def test_dp_loss_is_monotone_in_budget(rng):
    table = {f"l{i}": [(float(rng.random()), float(rng.integers(1, 10))) for _ in range(4)] for i in range(3)}
    db = make_db(table)
    previous = np.inf
    for budget in range(3, 31):
        try:
            plan = dp_allocate(db, budget, resolution=budget * 128)
        except InfeasibleBudgetError:
            continue
        assert plan.total_loss <= previous + 1e-12
        previous = plan.total_loss


def test_dp_matches_exhaustive_on_integer_costs(rng):
    for _ in range(20):
        table = {f"l{i}": [(float(rng.random()), float(rng.integers(1, 8))) for _ in range(3)] for i in range(3)}
        db = make_db(table)
        budget = int(rng.integers(3, 20))
        try:
            _, _, expected = exhaustive_allocate(db, budget)
        except InfeasibleBudgetError:
            with pytest.raises(InfeasibleBudgetError):
                dp_allocate(db, budget, resolution=budget * 128)
            continue
        plan = dp_allocate(db, budget, resolution=budget * 128)
        assert plan.total_loss == pytest.approx(expected, abs=1e-12)
        assert plan.total_cost <= budget


def test_database_validation():
    with pytest.raises(TensorFormatError):
        make_db({"a": []})
    with pytest.raises(TensorFormatError):
        make_db({"a": [(float("nan"), 1.0)]})
    with pytest.raises(TensorFormatError):
        make_db({"a": [(1.0, -1.0)]})


def test_database_manifest_round_trip(tmp_path):
    db = make_db({"a": [(0.0, 10.0), (4.0, 5.0)]})
    db.layers[0].levels[1].grid = "a1.grid.json"
    path = tmp_path / "db.json"
    db.save(str(path))
    loaded = CompressionDatabase.load(str(path))
    assert loaded.to_json() == db.to_json()
    assert loaded.resolve("a0.npy") == os.path.join(str(tmp_path), "a0.npy")
    with pytest.raises(UsageError):
        loaded.layer("missing")


def test_database_manifest_needs_identity_level(tmp_path):
    path = tmp_path / "db.json"
    make_db({"a": [(0.5, 10.0), (4.0, 5.0)]}).save(str(path))
    with pytest.raises(TensorFormatError, match="identity"):
        CompressionDatabase.load(str(path))


def test_apply_costs():
    db = make_db({"a": [(0.0, 10.0), (4.0, 5.0)]})
    apply_costs(db, {"a": {"a1": 0.25}})
    assert db.layer("a").level("a1").cost == 0.25
    with pytest.raises(TensorFormatError):
        apply_costs(db, {"a": {"a0": -3}})
    with pytest.raises(UsageError):
        apply_costs(db, {"a": {"nope": 1.0}})


def test_plan_json():
    plan = AllocationPlan({"a": "a0", "b": "2:4"}, 12.0, 1.0, 12.0)
    data = plan.to_json()
    assert data["choices"][1] == {"layer": "b", "label": "2:4"}
    assert AllocationPlan.from_json(data) == plan


def write_db(tmp_path, rng, names):
    layers = []
    for name in names:
        dense = rng.standard_normal((2, 4))
        save_matrix(dense, str(tmp_path / f"{name}_dense.npy"))
        save_matrix(np.zeros((2, 4)), str(tmp_path / f"{name}_zero.npy"))
        layers.append(LayerLevels(name, [
            Level(IDENTITY_LABEL, f"{name}_dense.npy", 0.0, 4.0),
            Level("2:4", f"{name}_zero.npy", 1.0, 1.0),
        ]))
    db = CompressionDatabase(layers, str(tmp_path))
    db.save(str(tmp_path / "db.json"))
    return CompressionDatabase.load(str(tmp_path / "db.json"))


def test_stitch_identity_is_byte_identical(tmp_path, rng):
    db = write_db(tmp_path, rng, ["fc1", "fc2"])
    plan = AllocationPlan({"fc1": IDENTITY_LABEL, "fc2": IDENTITY_LABEL}, 8.0, 0.0)
    out = tmp_path / "out"
    manifest = stitch(db, plan, str(out))
    for entry in manifest["layers"]:
        copied = (out / entry["weights"]).read_bytes()
        assert copied == (tmp_path / f"{entry['name']}_dense.npy").read_bytes()


def test_stitch_three_layers(tmp_path, rng):
    db = write_db(tmp_path, rng, ["a", "b", "c"])
    plan = AllocationPlan({"a": "2:4", "b": IDENTITY_LABEL, "c": "2:4"}, 6.0, 2.0)
    out = tmp_path / "out"
    stitch(db, plan, str(out))
    manifest = load_json(str(out / "manifest.json"))
    assert [(e["name"], e["label"]) for e in manifest["layers"]] == [("a", "2:4"), ("b", "dense"), ("c", "2:4")]
    assert manifest["layers"][0]["weights"] == "a__2-4.npy"
    assert not load_matrix(str(out / "a__2-4.npy")).any()


def test_stitch_absent_label(tmp_path, rng):
    db = write_db(tmp_path, rng, ["a"])
    with pytest.raises(UsageError):
        stitch(db, AllocationPlan({"a": "w3"}, 0.0, 0.0), str(tmp_path / "out"))
    with pytest.raises(UsageError):
        stitch(db, AllocationPlan({}, 0.0, 0.0), str(tmp_path / "out"))


def test_stitch_missing_weights_file(tmp_path, rng):
    db = write_db(tmp_path, rng, ["a"])
    os.remove(tmp_path / "a_zero.npy")
    with pytest.raises(FileNotFoundError):
        stitch(db, AllocationPlan({"a": "2:4"}, 1.0, 1.0), str(tmp_path / "out"))


def test_default_levels_labels():
    specs = default_levels([0.5], [(2, 4)], bits=[4], joint_bits=8)
    assert [s.label for s in specs] == ["s0.5000", "2:4", "w4", "s0.5000_w8", "2:4_w8"]
    blocks = default_levels([0.25], block_size=4)
    assert blocks[0].label == "b4_s0.2500"
    assert blocks[0].target == SparsityTarget.block(4, 0.25)


def test_build_database(tmp_path, rng, make_problem):
    problems = [make_problem(rng, 4, 8, name="fc1"), make_problem(rng, 3, 8, name="fc2")]
    specs = default_levels([0.5], [(2, 4)], bits=[4], joint_bits=4)
    db = build_database(problems, specs, str(tmp_path))
    db.save(str(tmp_path / "db.json"))

    loaded = CompressionDatabase.load(str(tmp_path / "db.json"))
    for problem, layer in zip(problems, loaded.layers):
        assert layer.name == problem.name
        labels = [level.label for level in layer.levels]
        assert labels == [IDENTITY_LABEL, "s0.5000", "2:4", "w4", "s0.5000_w4", "2:4_w4"]

        dense = layer.level(IDENTITY_LABEL)
        assert dense.loss == 0.0
        assert np.array_equal(load_matrix(loaded.resolve(dense.weights)), problem.weights)

        sparse = load_matrix(loaded.resolve(layer.level("s0.5000").weights))
        direct = prune_unstructured(problem, SparsityTarget.unstructured(0.5)).weights
        assert np.allclose(sparse, direct, atol=1e-8)
        assert layer.level("s0.5000").loss == pytest.approx(measure_loss(problem, sparse))

        joint = layer.level("2:4_w4")
        joint_weights = load_matrix(loaded.resolve(joint.weights))
        nm_weights = load_matrix(loaded.resolve(layer.level("2:4").weights))
        assert not np.any(joint_weights[nm_weights == 0])
        assert joint.grid is not None and os.path.exists(loaded.resolve(joint.grid))
        assert joint.cost == bop_cost(problem.weights.shape, 4, 32, 0.5)
        assert layer.level("w4").cost == bop_cost(problem.weights.shape, 4, 32)

    plan = dp_allocate(loaded, sum(layer.levels[0].cost for layer in loaded.layers) / 4)
    manifest = stitch(loaded, plan, str(tmp_path / "stitched"))
    assert len(manifest["layers"]) == 2


def test_build_database_records_activation_grid(tmp_path, rng, make_problem):
    problem = make_problem(rng, 4, 8, name="fc1")
    specs = default_levels(nm_patterns=[(2, 4)])
    build_database([problem], specs, str(tmp_path), act_bits=8).save(str(tmp_path / "db.json"))

    assert "act_grid" in load_json(str(tmp_path / "db.json"))["layers"][0]
    layer = CompressionDatabase.load(str(tmp_path / "db.json")).layer("fc1")
    act = layer.act_grid
    grid = QuantGrid(act["scale"], act["zero_point"], act["bits"], act["symmetric"])
    assert grid == fit_tensor_grid(problem.inputs, 8)
    assert act["bits"] == 8 and quantize_value(0.0, grid) == 0.0

    loaded = CompressionDatabase.load(str(tmp_path / "db.json"))
    dense_cost = loaded.layer("fc1").level(IDENTITY_LABEL).cost
    manifest = stitch(loaded, AllocationPlan({"fc1": IDENTITY_LABEL}, dense_cost, 0.0), str(tmp_path / "out"))
    assert manifest["layers"][0]["act_grid"] == act


def test_build_database_full_precision_has_no_activation_grid(tmp_path, rng, make_problem):
    problem = make_problem(rng, 2, 4, name="fc1")
    db = build_database([problem], default_levels(nm_patterns=[(2, 4)]), str(tmp_path))
    assert db.layers[0].act_grid is None
    assert "act_grid" not in db.to_json()["layers"][0]
