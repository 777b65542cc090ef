"""Analytical communication model for ranking grid configurations.

Per layer, five ring collectives are modelled (all-gather and reduce-scatter
on Z, the forward and backward all-reduces, and the data-parallel gradient
all-reduce).  Each costs its per-rank ring volume divided by the effective
bandwidth of its hierarchy level.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from fractions import Fraction
from typing import Callable, Iterable, Sequence

from hybrid4d.errors import ConfigError, InfeasibleError
from hybrid4d.grid import Axis, GridConfig, enumerate_configs
from hybrid4d.pmm.sharding import LayerSpec
from hybrid4d.simnet import ClusterSpec

INF = math.inf


@dataclass(frozen=True)
class BandwidthVector:
    beta_x: float
    beta_y: float
    beta_z: float
    beta_data: float

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ConfigError(f"{f.name} must be > 0")

    def of(self, axis: Axis) -> float:
        return getattr(self, f"beta_{axis.value}")


@dataclass(frozen=True)
class CommEstimate:
    """Seconds per collective for one layer.

    ``t_ar_y`` is the forward-output all-reduce and ``t_ar_x`` the backward
    input-gradient all-reduce; on a transposed layer they run on the X and Y
    groups respectively.
    """

    t_ag_z: float = 0.0
    t_rs_z: float = 0.0
    t_ar_y: float = 0.0
    t_ar_x: float = 0.0
    t_ar_data: float = 0.0

    @property
    def t_comm(self) -> float:
        return self.t_ag_z + self.t_rs_z + self.t_ar_y + self.t_ar_x + self.t_ar_data

    def __add__(self, other: CommEstimate) -> CommEstimate:
        return CommEstimate(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def as_dict(self) -> dict[str, float]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["t_comm"] = self.t_comm
        return d


def effective_bandwidths(config: GridConfig, cluster: ClusterSpec) -> BandwidthVector:
    """Per-level bandwidth: database lookup inside a node, shared inter-node link otherwise.

    Levels of extent 1 never communicate and get +inf.
    """
    betas = []
    inner = 1
    for size in config.as_tuple():
        if size == 1:
            betas.append(INF)
        elif inner * size <= cluster.g_node:
            betas.append(cluster.intra(inner, size))
        else:
            betas.append(cluster.beta_inter / min(cluster.g_node, inner))
        inner *= size
    return BandwidthVector(*betas)


@dataclass(frozen=True)
class CommVolumes:
    """Per-rank elements sent by each collective of one layer (exact rationals)."""

    ag_z: Fraction
    rs_z: Fraction
    ar_fwd: Fraction
    ar_bwd: Fraction
    ar_data: Fraction


def layer_comm_volumes(layer: LayerSpec, config: GridConfig, batch_shard_rows: int | None = None) -> CommVolumes:
    gx, gy, gz, gd = config.as_tuple()
    if layer.transposed:
        gx, gy = gy, gx
    m = layer.m // gd if batch_shard_rows is None else batch_shard_rows
    k, n = layer.k, layer.n
    F = Fraction
    return CommVolumes(
        ag_z=(gz - 1) * F(k * n, gx * gy * gz),
        rs_z=F(gz - 1, gz) * F(k * n, gx * gy),
        ar_fwd=2 * F(gy - 1, gy) * F(m * n, gz * gx),
        ar_bwd=2 * F(gx - 1, gx) * F(m * k, gz * gy),
        ar_data=2 * F(gd - 1, gd) * F(k * n, gx * gy * gz),
    )


def _cost(volume: Fraction, bytes_per_element: int, beta: float) -> float:
    if volume == 0:
        return 0.0
    return float(volume * bytes_per_element) / beta


def layer_comm_time(
    layer: LayerSpec,
    config: GridConfig,
    betas: BandwidthVector,
    bytes_per_element: int = 2,
    batch_shard_rows: int | None = None,
) -> CommEstimate:
    v = layer_comm_volumes(layer, config, batch_shard_rows)
    b_fwd, b_bwd = betas.beta_y, betas.beta_x
    if layer.transposed:
        b_fwd, b_bwd = b_bwd, b_fwd
    return CommEstimate(
        t_ag_z=_cost(v.ag_z, bytes_per_element, betas.beta_z),
        t_rs_z=_cost(v.rs_z, bytes_per_element, betas.beta_z),
        t_ar_y=_cost(v.ar_fwd, bytes_per_element, b_fwd),
        t_ar_x=_cost(v.ar_bwd, bytes_per_element, b_bwd),
        t_ar_data=_cost(v.ar_data, bytes_per_element, betas.beta_data),
    )


def network_comm_estimates(
    net: Sequence[LayerSpec], config: GridConfig, cluster: ClusterSpec, bytes_per_element: int = 2
) -> list[CommEstimate]:
    betas = effective_bandwidths(config, cluster)
    return [layer_comm_time(layer, config, betas, bytes_per_element) for layer in net]


def network_comm_time(
    net: Sequence[LayerSpec], config: GridConfig, cluster: ClusterSpec, bytes_per_element: int = 2
) -> float:
    """Sum of per-layer communication time; each layer's own transpose flag applies."""
    return sum(e.t_comm for e in network_comm_estimates(net, config, cluster, bytes_per_element))


def feasible(net: Sequence[LayerSpec]) -> Callable[[GridConfig], bool]:
    return lambda cfg: all(layer.fits(cfg) for layer in net)


def memory_limit(net: Sequence[LayerSpec], max_params_per_worker: float) -> Callable[[GridConfig], bool]:
    """Weight shards (plus one gathered layer) must fit the per-worker budget."""
    total = sum(layer.k * layer.n for layer in net)
    largest = max((layer.k * layer.n for layer in net), default=0)

    def check(cfg: GridConfig) -> bool:
        resident = total / cfg.tensor + largest / (cfg.g_x * cfg.g_y)
        return resident <= max_params_per_worker

    return check


def rank_configs(
    net: Sequence[LayerSpec],
    total_workers: int,
    cluster: ClusterSpec,
    constraints: Iterable[Callable[[GridConfig], bool]] = (),
    bytes_per_element: int = 2,
) -> list[tuple[GridConfig, float]]:
    """Feasible configs by predicted communication time, ties broken lexicographically."""
    candidates = enumerate_configs(total_workers, [feasible(net), *constraints])
    if not candidates:
        raise InfeasibleError(f"no feasible grid configuration for {total_workers} workers")
    scored = [(cfg, network_comm_time(net, cfg, cluster, bytes_per_element)) for cfg in candidates]
    return sorted(scored, key=lambda item: (tie_key(item[1]), item[0].as_tuple()))


def tie_key(seconds: float) -> float:
    """Times equal to 12 significant digits count as ties.

    Configs with identical exact costs can differ in the last bit depending
    on the order of float operations, which would let a uniform bandwidth
    rescale reshuffle them.
    """
    return float(f"{seconds:.12g}")


COLLECTIVE_AXES = {
    "ag_z": lambda layer: Axis.Z,
    "rs_z": lambda layer: Axis.Z,
    "ar_fwd": lambda layer: layer.contract_axis,
    "ar_bwd": lambda layer: layer.out_axis,
    "ar_data": lambda layer: Axis.DATA,
}
