"""Forward and backward pass of one tensor-parallel FC layer on the simulated grid.

Rank (i, j, k, d) of an untransposed layer holds the input block I[k, j], the
weight sub-shard W^[j, i] and produces O[k, i]:

    forward:  W = all_gather_z(W^);  O^ = I @ W;  O = all_reduce_y(O^)
    backward: dI = all_reduce_x(dO @ W.T);  dW^ = reduce_scatter_z(I.T @ dO)

Transposed layers run the same program with X and Y exchanged.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from hybrid4d.errors import ProtocolError, StateError
from hybrid4d.grid import Axis, Grid
from hybrid4d.pmm.sharding import LayerSpec, ShardedMatrix
from hybrid4d.simnet import Fabric


class MatmulMode(enum.Enum):
    NN = "NN"
    NT = "NT"
    TN = "TN"


MODE_ORDER = (MatmulMode.NN, MatmulMode.NT, MatmulMode.TN)


def local_matmul(a: np.ndarray, b: np.ndarray, mode: MatmulMode = MatmulMode.NN) -> np.ndarray:
    """``a @ b`` with the operand storage implied by ``mode``.

    NT keeps ``b`` stored transposed and TN keeps ``a`` stored transposed; the
    product is the same, only the memory access pattern differs.
    """
    if mode is MatmulMode.NN:
        return np.matmul(np.ascontiguousarray(a), np.ascontiguousarray(b))
    if mode is MatmulMode.NT:
        bt = np.ascontiguousarray(b.T)
        return np.matmul(np.ascontiguousarray(a), bt.T)
    if mode is MatmulMode.TN:
        at = np.ascontiguousarray(a.T)
        return np.matmul(at.T, np.ascontiguousarray(b))
    raise ValueError(mode)


# the mode each product uses when nothing has been tuned
DEFAULT_MODES = {"forward": MatmulMode.NN, "grad_input": MatmulMode.NT, "grad_weight": MatmulMode.TN}


@dataclass
class LayerCache:
    layer: LayerSpec
    inp: ShardedMatrix
    weight: dict[int, np.ndarray]  # all-gathered 2D weight block per rank


def _groups_apply(fabric: Fabric, grid: Grid, axis: Axis, op: str, bufs: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    out = {}
    collective = getattr(fabric, op)
    for g in grid.groups(axis):
        out.update(collective(g, {r: bufs[r] for r in g.members}))
    return out


def _check_layout(mat: ShardedMatrix, expected, what: str):
    if mat.layout != expected:
        raise ProtocolError(f"{what} has layout {mat.layout}, expected {expected}")


def tp_forward(
    inp: ShardedMatrix,
    weight: ShardedMatrix,
    grid: Grid,
    layer: LayerSpec,
    fabric: Fabric,
    modes: dict | None = None,
) -> tuple[ShardedMatrix, LayerCache]:
    modes = {**DEFAULT_MODES, **(modes or {})}
    _check_layout(inp, layer.input_layout(), "input")
    _check_layout(weight, layer.weight_layout(), "weight")
    if inp.shape != (layer.m, layer.k) or weight.shape != (layer.k, layer.n):
        raise ProtocolError(f"operand shapes {inp.shape} x {weight.shape} do not match layer {layer}")
    wshape = layer.gathered_weight_layout()
    bshape = (layer.k // grid.config.extent(wshape.rows[0]), layer.n // grid.config.extent(wshape.cols[0]))

    with fabric.scope(collective="all_gather_z"):
        full = _groups_apply(fabric, grid, Axis.Z, "all_gather", weight.blocks)
    full = {r: v.reshape(bshape) for r, v in full.items()}
    partial = {r: local_matmul(inp.blocks[r], full[r], modes["forward"]).ravel() for r in range(grid.size)}
    with fabric.scope(collective="all_reduce_fwd"):
        summed = _groups_apply(fabric, grid, layer.contract_axis, "all_reduce", partial)
    oshape = (inp.block_shape[0], bshape[1])
    out = ShardedMatrix(
        (layer.m, layer.n), layer.output_layout(), grid, {r: v.reshape(oshape) for r, v in summed.items()}
    )
    return out, LayerCache(layer, inp, full)


def tp_backward(
    grad_out: ShardedMatrix,
    cache: LayerCache | None,
    grid: Grid,
    fabric: Fabric,
    modes: dict | None = None,
) -> tuple[ShardedMatrix, ShardedMatrix]:
    """Returns (dL/dI distributed like I, dL/dW^ distributed like W^)."""
    if cache is None:
        raise StateError("backward called before forward: no cached activations")
    modes = {**DEFAULT_MODES, **(modes or {})}
    layer = cache.layer
    _check_layout(grad_out, layer.output_layout(), "output gradient")

    partial = {
        r: local_matmul(grad_out.blocks[r], cache.weight[r].T, modes["grad_input"]).ravel()
        for r in range(grid.size)
    }
    with fabric.scope(collective="all_reduce_bwd"):
        summed = _groups_apply(fabric, grid, layer.out_axis, "all_reduce", partial)
    ishape = cache.inp.block_shape
    grad_in = ShardedMatrix(
        (layer.m, layer.k), layer.input_layout(), grid, {r: v.reshape(ishape) for r, v in summed.items()}
    )

    wpartial = {
        r: local_matmul(cache.inp.blocks[r].T, grad_out.blocks[r], modes["grad_weight"]).ravel()
        for r in range(grid.size)
    }
    with fabric.scope(collective="reduce_scatter_z"):
        shards = _groups_apply(fabric, grid, Axis.Z, "reduce_scatter", wpartial)
    grad_w = ShardedMatrix((layer.k, layer.n), layer.weight_layout(), grid, shards)
    return grad_in, grad_w
