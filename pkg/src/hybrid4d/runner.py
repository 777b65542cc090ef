"""Experiment drivers shared by the CLI and the acceptance suite."""
from __future__ import annotations

from fractions import Fraction
from functools import lru_cache
from typing import Sequence

from hybrid4d.grid import Axis, Grid, GridConfig, build_grid, enumerate_configs
from hybrid4d.overlap import LayerCompute, OverlapFlags, Timeline, build_schedule
from hybrid4d.perfmodel import CommEstimate, feasible, layer_comm_volumes, tie_key
from hybrid4d.pmm.sharding import LayerSpec
from hybrid4d.simnet import ClusterSpec, TrafficReport, axis_collective_time


def local_dims(layer: LayerSpec, config: GridConfig) -> tuple[int, int, int]:
    """(rows, contraction, cols) of the local matmul on every rank."""
    return (
        layer.m // (config.g_data * config.g_z),
        layer.k // config.extent(layer.contract_axis),
        layer.n // config.extent(layer.out_axis),
    )


def roofline_compute(net: Sequence[LayerSpec], config: GridConfig, peak_flops: float) -> list[LayerCompute]:
    out = []
    for layer in net:
        m, k, n = local_dims(layer, config)
        t = 2.0 * m * k * n / peak_flops
        out.append(LayerCompute(t, t, t))
    return out


def simulated_comm(
    net: Sequence[LayerSpec], grid: Grid, cluster: ClusterSpec, bytes_per_element: int = 2
) -> list[CommEstimate]:
    """Per-layer collective times from the event simulator, all groups of an axis active at once."""
    cfg = grid.config

    @lru_cache(maxsize=None)
    def run(axis: Axis, nbytes: int, kind: str) -> float:
        return axis_collective_time(grid, axis, nbytes, cluster, kind)

    out = []
    for layer in net:
        m, k, n = local_dims(layer, cfg)
        b = bytes_per_element
        out.append(
            CommEstimate(
                t_ag_z=run(Axis.Z, k * n * b, "all_gather"),
                t_rs_z=run(Axis.Z, k * n * b, "reduce_scatter"),
                t_ar_y=run(layer.contract_axis, m * n * b, "all_reduce"),
                t_ar_x=run(layer.out_axis, m * k * b, "all_reduce"),
                t_ar_data=run(Axis.DATA, k * n // cfg.g_z * b, "all_reduce"),
            )
        )
    return out


def simulate_batch(
    net: Sequence[LayerSpec],
    config: GridConfig,
    cluster: ClusterSpec,
    peak_flops: float,
    flags: OverlapFlags = OverlapFlags(),
    bytes_per_element: int = 2,
) -> Timeline:
    grid = build_grid(config.total, config, cluster.g_node)
    comm = simulated_comm(net, grid, cluster, bytes_per_element)
    return build_schedule(net, roofline_compute(net, config, peak_flops), comm, flags)


def measured_ranking(
    net: Sequence[LayerSpec],
    total_workers: int,
    cluster: ClusterSpec,
    peak_flops: float,
    flags: OverlapFlags = OverlapFlags(),
    bytes_per_element: int = 2,
) -> list[tuple[GridConfig, float]]:
    """Feasible configs ordered by simulated batch time."""
    scored = [
        (cfg, simulate_batch(net, cfg, cluster, peak_flops, flags, bytes_per_element).batch_time())
        for cfg in enumerate_configs(total_workers, [feasible(net)])
    ]
    return sorted(scored, key=lambda item: (tie_key(item[1]), item[0].as_tuple()))


_VOLUME_FIELD = {
    "all_gather_z": "ag_z",
    "reduce_scatter_z": "rs_z",
    "all_reduce_fwd": "ar_fwd",
    "all_reduce_bwd": "ar_bwd",
}


def traffic_mismatches(
    traffic: TrafficReport, net: Sequence[LayerSpec], config: GridConfig, bytes_per_element: int
) -> list[str]:
    """Compare every recorded per-rank byte count with the analytical ring volume.

    Returns human-readable mismatch descriptions; an empty list means exact
    agreement.  Collectives the model predicts but that never ran (and vice
    versa) are reported too.
    """
    problems = []
    seen: set[tuple[int, str]] = set()
    for e in traffic.events:
        layer_idx = e["layer"]
        field = "ar_data" if e.get("phase") == "data-sync" else _VOLUME_FIELD[e["collective"]]
        seen.add((layer_idx, field))
        expected = getattr(layer_comm_volumes(net[layer_idx], config), field) * bytes_per_element
        for rank, sent in zip(e["members"], e["bytes_per_rank"]):
            if Fraction(sent) != expected:
                problems.append(f"layer {layer_idx} {field} rank {rank}: sent {sent}, model {expected}")
    for idx, layer in enumerate(net):
        vols = layer_comm_volumes(layer, config)
        for field in ("ag_z", "rs_z", "ar_fwd", "ar_bwd", "ar_data"):
            if getattr(vols, field) != 0 and (idx, field) not in seen:
                problems.append(f"layer {idx} {field}: model predicts traffic but none was recorded")
    return problems
