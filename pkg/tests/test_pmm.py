import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybrid4d import GridConfig, ProtocolError, ShapeError, StateError, build_grid
from hybrid4d.grid import Axis
from hybrid4d.pmm import (
    LayerSpec,
    MatmulMode,
    ShardedMatrix,
    chain,
    local_matmul,
    mode_disagreement,
    network_step,
    sgd_update,
    shard,
    shard_weight,
    tp_backward,
    tp_forward,
    tune_matmul_mode,
)
from hybrid4d.pmm.tuner import select_mode, time_modes
from hybrid4d.simnet import Fabric
from hybrid4d.verify import rel_err, serial_step


def setup(cfg, m, k, n, transposed=False, seed=0):
    grid = build_grid(GridConfig(*cfg).total, GridConfig(*cfg), 4)
    layer = LayerSpec(m, k, n, transposed)
    rng = np.random.default_rng(seed)
    I = rng.normal(size=(m, k))
    W = rng.normal(size=(k, n))
    return grid, layer, I, W


# -- sharding ----------------------------------------------------------------


def test_single_rank_holds_whole_weight():
    grid, layer, _, W = setup((1, 1, 1, 1), 2, 3, 5)
    sw = shard_weight(W, grid, layer)
    np.testing.assert_array_equal(sw.local(0), W.ravel())


def test_two_by_two_by_two_weight_blocks_hold_two_elements():
    grid, layer, _, W = setup((2, 2, 2, 1), 4, 4, 4)
    sw = shard_weight(W, grid, layer)
    assert all(b.size == 2 for b in sw.blocks.values())
    np.testing.assert_array_equal(sw.gather(), W)


cfgs = st.sampled_from([(1, 1, 1, 1), (2, 1, 1, 1), (1, 3, 1, 1), (2, 2, 2, 1), (1, 2, 4, 2), (3, 2, 2, 2), (2, 1, 3, 1)])


@settings(max_examples=50, deadline=None)
@given(cfgs, st.booleans(), st.integers(1, 3), st.integers(0, 1000))
def test_weight_round_trip_is_bit_exact(cfg, transposed, mult, seed):
    c = GridConfig(*cfg)
    k = c.g_x * c.g_y * mult
    n = c.g_x * c.g_y * c.g_z * mult
    grid, layer, _, W = setup(cfg, c.g_data * c.g_z, k, n, transposed, seed)
    assert np.array_equal(shard_weight(W, grid, layer).gather(), W)


def test_transposed_weight_swaps_axes():
    grid, layer, _, W = setup((2, 1, 1, 1), 2, 4, 6, transposed=True)
    sw = shard_weight(W, grid, layer)
    assert sw.layout.rows == (Axis.X,) and sw.layout.cols == (Axis.Y,)
    np.testing.assert_array_equal(sw.local(1), W[2:].ravel())


def test_shard_rejects_indivisible():
    grid, layer, _, W = setup((2, 2, 2, 1), 4, 6, 8)
    with pytest.raises(ShapeError, match="axes y"):
        shard(np.zeros((4, 5)), grid, layer.input_layout())
    with pytest.raises(ShapeError, match="does not match"):
        shard_weight(np.zeros((3, 3)), grid, layer)


def test_validate_names_the_axis():
    with pytest.raises(ShapeError, match="g_y"):
        LayerSpec(8, 3, 8).validate(GridConfig(1, 2, 1, 1))
    with pytest.raises(ShapeError, match="g_x"):
        LayerSpec(8, 8, 3).validate(GridConfig(2, 1, 1, 1))
    with pytest.raises(ShapeError, match="g_x"):
        LayerSpec(8, 3, 8, transposed=True).validate(GridConfig(2, 1, 1, 1))
    with pytest.raises(ShapeError, match="axes data, z"):
        LayerSpec(5, 4, 4).validate(GridConfig(1, 1, 2, 2))
    with pytest.raises(ShapeError, match="g_z"):
        LayerSpec(2, 1, 1).validate(GridConfig(1, 1, 2, 1))


# -- one layer ---------------------------------------------------------------


def forward(grid, layer, I, W):
    fabric = Fabric(grid)
    x = shard(I, grid, layer.input_layout())
    out, cache = tp_forward(x, shard_weight(W, grid, layer), grid, layer, fabric)
    return out, cache, fabric


def test_single_rank_forward_is_serial_product():
    grid, layer, I, W = setup((1, 1, 1, 1), 3, 4, 5)
    out, _, fabric = forward(grid, layer, I, W)
    np.testing.assert_array_equal(out.gather(), I @ W)
    assert fabric.report.total_bytes == 0


def test_identity_input_returns_weight():
    grid, layer, _, W = setup((2, 2, 2, 1), 8, 8, 4)
    out, _, _ = forward(grid, layer, np.eye(8), W)
    np.testing.assert_allclose(out.gather(), W, rtol=0, atol=1e-15)


@pytest.mark.parametrize("transposed", [False, True])
def test_forward_matches_serial(transposed):
    grid, layer, I, W = setup((2, 2, 2, 1), 4, 6, 8, transposed, seed=3)
    out, _, _ = forward(grid, layer, I, W)
    assert rel_err(out.gather(), I @ W) < 1e-12


@pytest.mark.parametrize("cfg", [(1, 1, 1, 1), (2, 2, 2, 1), (2, 1, 2, 2), (1, 4, 2, 1)])
@pytest.mark.parametrize("transposed", [False, True])
def test_backward_matches_serial(cfg, transposed):
    grid, layer, I, W = setup(cfg, 8, 8, 8, transposed, seed=5)
    out, cache, fabric = forward(grid, layer, I, W)
    dO = np.random.default_rng(9).normal(size=out.shape)
    gin, gw = tp_backward(shard(dO, grid, layer.output_layout()), cache, grid, fabric)
    assert rel_err(gin.gather(), dO @ W.T) < 1e-12
    # the weight gradient is still per data-replica; sum replicas for the full-batch gradient
    want = I.T @ dO
    if grid.config.g_data == 1:
        assert rel_err(gw.gather(), want) < 1e-12


def test_zero_output_gradient_gives_zero_gradients():
    grid, layer, I, W = setup((2, 2, 2, 1), 4, 4, 8)
    out, cache, fabric = forward(grid, layer, I, W)
    gin, gw = tp_backward(shard(np.zeros(out.shape), grid, layer.output_layout()), cache, grid, fabric)
    assert not gin.gather().any() and not gw.gather().any()


def test_backward_without_forward():
    grid, layer, I, W = setup((2, 1, 1, 1), 2, 2, 2)
    with pytest.raises(StateError):
        tp_backward(shard(np.zeros((2, 2)), grid, layer.output_layout()), None, grid, Fabric(grid))


def test_forward_rejects_wrong_layout():
    grid, layer, I, W = setup((2, 2, 1, 1), 2, 4, 4)
    wrong = shard(I, grid, layer.output_layout())
    with pytest.raises(ProtocolError, match="layout"):
        tp_forward(wrong, shard_weight(W, grid, layer), grid, layer, Fabric(grid))


# -- network -----------------------------------------------------------------


def test_data_parallel_halves_sum_to_full_batch_gradient():
    net = chain(8, [4, 6, 4])
    rng = np.random.default_rng(11)
    weights = [rng.normal(size=(l.k, l.n)) for l in net]
    batch = rng.normal(size=(8, 4))
    grid = build_grid(2, GridConfig(1, 1, 1, 2))
    step = network_step(net, weights, batch, grid)
    _, out, _, grads = serial_step(weights, batch)
    for g, want in zip(step.weight_grads, grads):
        assert rel_err(g, want) < 1e-12
    # and by hand: each half contributes its own partial gradient
    halves = [serial_step(weights, batch[h * 4:(h + 1) * 4]) for h in range(2)]
    for li in range(2):
        summed = sum(0.5 * h[3][li] for h in halves)  # each half's mean is over half the elements
        assert rel_err(step.weight_grads[li], summed) < 1e-12


def test_two_layer_tensor_grid_output():
    net = chain(4, [4, 8, 4])
    rng = np.random.default_rng(2)
    weights = [rng.normal(size=(l.k, l.n)) for l in net]
    batch = rng.normal(size=(4, 4))
    step = network_step(net, weights, batch, build_grid(8, GridConfig(2, 2, 2, 1)))
    assert rel_err(step.output, batch @ weights[0] @ weights[1]) < 1e-12


def test_single_layer_without_data_parallelism_has_no_data_traffic():
    net = chain(4, [4, 4])
    grid = build_grid(8, GridConfig(2, 2, 2, 1))
    step = network_step(net, [np.ones((4, 4))], np.ones((4, 4)), grid)
    assert not step.traffic.filter(phase="data-sync")
    assert "data-sync" not in step.phase_bytes


def test_network_rejects_bad_shapes():
    grid = build_grid(1, GridConfig(1, 1, 1, 1))
    with pytest.raises(ShapeError, match="expects"):
        network_step([LayerSpec(2, 2, 3), LayerSpec(2, 4, 2)], [np.ones((2, 3)), np.ones((4, 2))], np.ones((2, 2)), grid)
    with pytest.raises(ShapeError, match="batch shape"):
        network_step(chain(2, [2, 2]), [np.ones((2, 2))], np.ones((3, 2)), grid)
    with pytest.raises(ShapeError, match="no layers"):
        network_step([], [], np.ones((2, 2)), grid)


def test_sgd_update_decreases_loss():
    net = chain(8, [4, 8, 4])
    grid = build_grid(8, GridConfig(2, 2, 1, 2))
    rng = np.random.default_rng(0)
    weights = [shard_weight(rng.uniform(-1, 1, (l.k, l.n)), grid, l) for l in net]
    batch = rng.uniform(-1, 1, (8, 4))
    first = network_step(net, weights, batch, grid)
    weights = sgd_update(weights, first.grad_shards, 0.05)
    second = network_step(net, weights, batch, grid)
    assert second.loss < first.loss
    assert all(isinstance(w, ShardedMatrix) for w in weights)


# -- tuner -------------------------------------------------------------------


def test_modes_agree():
    assert mode_disagreement((17, 9, 13), seed=1) < 1e-12
    a, b = np.random.default_rng(0).normal(size=(5, 7)), np.random.default_rng(1).normal(size=(7, 3))
    for mode in MatmulMode:
        np.testing.assert_allclose(local_matmul(a, b, mode), a @ b, rtol=1e-13)


def test_equal_costs_tie_break_to_nn():
    assert tune_matmul_mode((4, 4, 4), timer=lambda mode, a, b: 1.0, trials=3) is MatmulMode.NN
    assert select_mode({MatmulMode.NN: 2.0, MatmulMode.NT: 1.0, MatmulMode.TN: 1.0}) is MatmulMode.NT


@pytest.mark.parametrize("seed", range(5))
def test_slow_mode_never_selected(seed):
    rng = np.random.default_rng(seed)

    def timer(mode, a, b):
        base = 1.0 + 0.2 * rng.random()
        return base * (8.0 if mode is MatmulMode.TN else 1.0)

    assert tune_matmul_mode((8, 8, 8), timer=timer, trials=5, seed=seed) is not MatmulMode.TN


def test_time_modes_rejects_zero_trials():
    with pytest.raises(ValueError):
        time_modes((2, 2, 2), trials=0)
