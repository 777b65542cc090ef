"""Block distributions of dense matrices over the 4D grid."""
from __future__ import annotations

from dataclasses import dataclass, replace
from math import prod

import numpy as np

from hybrid4d.errors import ShapeError
from hybrid4d.grid import HIERARCHY, Axis, Grid, GridConfig


@dataclass(frozen=True)
class Layout:
    """Which grid axes split the rows and columns (outermost first).

    With ``zshard`` set, each 2D block is flattened row-major and split into
    contiguous chunks along that axis, FSDP style.  Axes not mentioned
    replicate the block.
    """

    rows: tuple[Axis, ...] = ()
    cols: tuple[Axis, ...] = ()
    zshard: Axis | None = None

    def splits(self, config: GridConfig) -> tuple[int, int]:
        return prod(config.extent(a) for a in self.rows), prod(config.extent(a) for a in self.cols)

    def replicated(self) -> tuple[Axis, ...]:
        used = set(self.rows) | set(self.cols) | ({self.zshard} if self.zshard else set())
        return tuple(a for a in HIERARCHY if a not in used)


@dataclass(frozen=True)
class LayerSpec:
    """One fully connected layer: O (m x n) = I (m x k) @ W (k x n).

    ``m`` counts global batch rows (batch * sequence).  A transposed layer
    swaps the roles of the X and Y axes.
    """

    m: int
    k: int
    n: int
    transposed: bool = False

    def __post_init__(self):
        for name in ("m", "k", "n"):
            if getattr(self, name) < 1:
                raise ShapeError(f"layer dimension {name} must be >= 1, got {getattr(self, name)}")

    @property
    def contract_axis(self) -> Axis:
        """Axis splitting the contraction dimension k (all-reduced in forward)."""
        return Axis.X if self.transposed else Axis.Y

    @property
    def out_axis(self) -> Axis:
        """Axis splitting the output columns n (all-reduced in backward)."""
        return Axis.Y if self.transposed else Axis.X

    def with_batch(self, m: int) -> LayerSpec:
        return replace(self, m=m)

    def input_layout(self) -> Layout:
        return Layout((Axis.DATA, Axis.Z), (self.contract_axis,))

    def weight_layout(self) -> Layout:
        return Layout((self.contract_axis,), (self.out_axis,), zshard=Axis.Z)

    def gathered_weight_layout(self) -> Layout:
        return Layout((self.contract_axis,), (self.out_axis,))

    def output_layout(self) -> Layout:
        return Layout((Axis.DATA, Axis.Z), (self.out_axis,))

    def validate(self, config: GridConfig) -> None:
        """Raise ShapeError unless every block of this layer divides exactly."""
        rows = config.g_data * config.g_z
        if self.m % rows:
            raise ShapeError(f"batch rows m={self.m} not divisible by g_data*g_z={rows} (axes data, z)")
        ga, gb = config.extent(self.contract_axis), config.extent(self.out_axis)
        if self.k % ga:
            raise ShapeError(f"k={self.k} not divisible by g_{self.contract_axis.value}={ga}")
        if self.n % gb:
            raise ShapeError(f"n={self.n} not divisible by g_{self.out_axis.value}={gb}")
        block = (self.k // ga) * (self.n // gb)
        if block % config.g_z:
            raise ShapeError(f"weight block of {block} elements not divisible by g_z={config.g_z} (axis z)")

    def fits(self, config: GridConfig) -> bool:
        try:
            self.validate(config)
        except ShapeError:
            return False
        return True


def _block_index(grid: Grid, rank: int, axes: tuple[Axis, ...]) -> int:
    idx = 0
    for a in axes:
        idx = idx * grid.config.extent(a) + grid.coord(rank, a)
    return idx


@dataclass
class ShardedMatrix:
    shape: tuple[int, int]
    layout: Layout
    grid: Grid
    blocks: dict[int, np.ndarray]

    @property
    def block_shape(self) -> tuple[int, int]:
        pr, pc = self.layout.splits(self.grid.config)
        return self.shape[0] // pr, self.shape[1] // pc

    def block_coords(self, rank: int) -> tuple[int, int]:
        return _block_index(self.grid, rank, self.layout.rows), _block_index(self.grid, rank, self.layout.cols)

    def local(self, rank: int) -> np.ndarray:
        return self.blocks[rank]

    def block2d(self, rank: int) -> np.ndarray:
        b = self.blocks[rank]
        return b.reshape(self.block_shape) if self.layout.zshard is None else b

    def gather(self) -> np.ndarray:
        """Reassemble the global matrix from the first replica of every block."""
        br, bc = self.block_shape
        out = np.empty(self.shape, dtype=np.result_type(*self.blocks.values()))
        chunks: dict[tuple[int, int], dict[int, np.ndarray]] = {}
        for rank in range(self.grid.size):
            bi = self.block_coords(rank)
            zi = self.grid.coord(rank, self.layout.zshard) if self.layout.zshard else 0
            chunks.setdefault(bi, {}).setdefault(zi, self.blocks[rank])
        for (ri, ci), parts in chunks.items():
            flat = np.concatenate([parts[z] for z in sorted(parts)]) if self.layout.zshard else parts[0]
            out[ri * br:(ri + 1) * br, ci * bc:(ci + 1) * bc] = flat.reshape(br, bc)
        return out

    def map(self, fn) -> ShardedMatrix:
        return ShardedMatrix(self.shape, self.layout, self.grid, {r: fn(b) for r, b in self.blocks.items()})


def shard(dense: np.ndarray, grid: Grid, layout: Layout) -> ShardedMatrix:
    dense = np.asarray(dense)
    if dense.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {dense.shape}")
    rows, cols = dense.shape
    cfg = grid.config
    for dim, axes, label in ((rows, layout.rows, "rows"), (cols, layout.cols, "cols")):
        parts = prod(cfg.extent(a) for a in axes)
        if dim % parts:
            names = ",".join(a.value for a in axes)
            raise ShapeError(f"{label}={dim} not divisible by {parts} (axes {names})")
    pr, pc = layout.splits(cfg)
    br, bc = rows // pr, cols // pc
    if layout.zshard is not None and (br * bc) % cfg.extent(layout.zshard):
        raise ShapeError(
            f"block of {br * bc} elements not divisible by g_{layout.zshard.value}={cfg.extent(layout.zshard)}"
        )
    blocks = {}
    for rank in range(grid.size):
        ri, ci = _block_index(grid, rank, layout.rows), _block_index(grid, rank, layout.cols)
        block = dense[ri * br:(ri + 1) * br, ci * bc:(ci + 1) * bc]
        if layout.zshard is not None:
            gz = cfg.extent(layout.zshard)
            zi = grid.coord(rank, layout.zshard)
            chunk = br * bc // gz
            block = block.reshape(-1)[zi * chunk:(zi + 1) * chunk]
        blocks[rank] = np.array(block, dtype=np.float64)
    return ShardedMatrix((rows, cols), layout, grid, blocks)


def shard_weight(weight: np.ndarray, grid: Grid, layer: LayerSpec) -> ShardedMatrix:
    """Z-sharded weight blocks; transposed layers get the swapped X/Y layout here, once."""
    weight = np.asarray(weight)
    if weight.shape != (layer.k, layer.n):
        raise ShapeError(f"weight shape {weight.shape} does not match layer ({layer.k}, {layer.n})")
    return shard(weight, grid, layer.weight_layout())
