"""Multi-layer training step: forward, mean-squared loss, backward, data-parallel sync."""
from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from hybrid4d.errors import ShapeError
from hybrid4d.grid import Axis, Grid
from hybrid4d.pmm.layer import tp_backward, tp_forward
from hybrid4d.pmm.sharding import LayerSpec, ShardedMatrix, shard, shard_weight
from hybrid4d.simnet import Fabric, TrafficReport


def alternate(layers: Sequence[LayerSpec]) -> list[LayerSpec]:
    """Mark every other layer (1, 3, ...) as transposed so outputs chain into inputs."""
    return [replace(layer, transposed=bool(idx % 2)) for idx, layer in enumerate(layers)]


def chain(batch_rows: int, dims: Sequence[int]) -> list[LayerSpec]:
    """Layers k0->k1->...; ``dims`` lists the feature widths including the input."""
    return alternate([LayerSpec(batch_rows, a, b) for a, b in zip(dims[:-1], dims[1:])])


def check_chain(layers: Sequence[LayerSpec]) -> None:
    for idx, (a, b) in enumerate(zip(layers[:-1], layers[1:])):
        if a.n != b.k:
            raise ShapeError(f"layer {idx} outputs {a.n} features but layer {idx + 1} expects {b.k}")
        if a.m != b.m:
            raise ShapeError(f"layer {idx} has {a.m} batch rows but layer {idx + 1} has {b.m}")


def init_weights(layers: Sequence[LayerSpec], seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.uniform(-1.0, 1.0, size=(layer.k, layer.n)) for layer in layers]


@dataclass
class StepResult:
    loss: float
    output: np.ndarray
    input_grad: np.ndarray
    weight_grads: list[np.ndarray]
    grad_shards: list[ShardedMatrix]
    traffic: TrafficReport
    phase_bytes: dict[str, int] = field(default_factory=dict)
    wall: dict[str, float] = field(default_factory=dict)


def _data_sync(grad: ShardedMatrix, grid: Grid, fabric: Fabric) -> ShardedMatrix:
    if grid.config.g_data == 1:
        return grad
    out = {}
    for g in grid.groups(Axis.DATA):
        out.update(fabric.all_reduce(g, {r: grad.blocks[r] for r in g.members}))
    return ShardedMatrix(grad.shape, grad.layout, grid, out)


def network_step(
    layers: Sequence[LayerSpec],
    weights: Sequence[np.ndarray | ShardedMatrix],
    batch: np.ndarray,
    grid: Grid,
    fabric: Fabric | None = None,
    modes: dict | None = None,
) -> StepResult:
    """One iteration of a linear FC stack under the 4D decomposition.

    Loss is the mean of the squared final outputs over the global batch.
    Returned weight gradients are gathered after the data-parallel all-reduce.
    """
    net = alternate(layers)
    if not net:
        raise ShapeError("network has no layers")
    check_chain(net)
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape != (net[0].m, net[0].k):
        raise ShapeError(f"batch shape {batch.shape} does not match first layer ({net[0].m}, {net[0].k})")
    for layer in net:
        layer.validate(grid.config)
    if len(weights) != len(net):
        raise ShapeError(f"{len(weights)} weight matrices for {len(net)} layers")
    fabric = fabric if fabric is not None else Fabric(grid)
    wall = {}

    shards = [w if isinstance(w, ShardedMatrix) else shard_weight(w, grid, layer) for w, layer in zip(weights, net)]
    act = shard(batch, grid, net[0].input_layout())

    t0 = time.perf_counter()
    caches = []
    with fabric.scope(phase="fwd"):
        for idx, (layer, w) in enumerate(zip(net, shards)):
            with fabric.scope(layer=idx):
                act, cache = tp_forward(act, w, grid, layer, fabric, modes)
            caches.append(cache)
    wall["fwd"] = time.perf_counter() - t0

    output = act.gather()
    scale = 2.0 / output.size
    loss = float(np.mean(output**2))
    grad = act.map(lambda b: scale * b)

    t0 = time.perf_counter()
    grads: list[ShardedMatrix | None] = [None] * len(net)
    with fabric.scope(phase="bwd"):
        for idx in reversed(range(len(net))):
            with fabric.scope(layer=idx):
                grad, grads[idx] = tp_backward(grad, caches[idx], grid, fabric, modes)
    wall["bwd"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with fabric.scope(phase="data-sync"):
        for idx in reversed(range(len(net))):
            with fabric.scope(layer=idx):
                grads[idx] = _data_sync(grads[idx], grid, fabric)
    wall["data-sync"] = time.perf_counter() - t0

    phase_bytes: Counter = Counter()
    for e in fabric.report.events:
        phase_bytes[e.get("phase", "other")] += sum(e["bytes_per_rank"])

    return StepResult(
        loss=loss,
        output=output,
        input_grad=grad.gather(),
        weight_grads=[g.gather() for g in grads],
        grad_shards=grads,
        traffic=fabric.report,
        phase_bytes=dict(phase_bytes),
        wall=wall,
    )


def sgd_update(weights: Sequence[ShardedMatrix], grads: Sequence[ShardedMatrix], lr: float) -> list[ShardedMatrix]:
    """Apply ``w -= lr * g`` shard by shard; no communication needed after data sync."""
    out = []
    for w, g in zip(weights, grads):
        if w.layout != g.layout:
            raise ShapeError("weight and gradient shards are laid out differently")
        out.append(ShardedMatrix(w.shape, w.layout, w.grid, {r: w.blocks[r] - lr * g.blocks[r] for r in w.blocks}))
    return out
