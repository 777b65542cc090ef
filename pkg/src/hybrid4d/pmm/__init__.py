"""Sharded matrices and the 3D tensor-parallel FC layer."""

from hybrid4d.pmm.layer import DEFAULT_MODES, LayerCache, MatmulMode, local_matmul, tp_backward, tp_forward
from hybrid4d.pmm.network import StepResult, alternate, chain, init_weights, network_step, sgd_update
from hybrid4d.pmm.sharding import LayerSpec, Layout, ShardedMatrix, shard, shard_weight
from hybrid4d.pmm.tuner import mode_disagreement, time_modes, tune_matmul_mode

__all__ = [
    "DEFAULT_MODES",
    "LayerCache",
    "LayerSpec",
    "Layout",
    "MatmulMode",
    "ShardedMatrix",
    "StepResult",
    "alternate",
    "chain",
    "init_weights",
    "local_matmul",
    "mode_disagreement",
    "network_step",
    "sgd_update",
    "shard",
    "shard_weight",
    "time_modes",
    "tp_backward",
    "tp_forward",
    "tune_matmul_mode",
]
