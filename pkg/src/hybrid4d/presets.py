"""GPT-style model presets and their FC-stack equivalents.

Each transformer block becomes the chain h -> 2h -> h -> 4h -> h.  The chain
has the same 12h^2 weights per block as a GPT block, hence the same model
flops and the same weight-proportional traffic (Z all-gather/reduce-scatter,
data all-reduce); the two activation all-reduces move 8h + 8h columns per
block instead of 9h + 7h.
"""
from __future__ import annotations

from dataclasses import dataclass

from hybrid4d.errors import ConfigError
from hybrid4d.pmm.network import chain
from hybrid4d.pmm.sharding import LayerSpec


@dataclass(frozen=True)
class GPTPreset:
    name: str
    params: str
    layers: int
    hidden: int
    heads: int


GPT_PRESETS = {
    p.name: p
    for p in (
        GPTPreset("GPT-5B", "5B", 24, 4096, 32),
        GPTPreset("GPT-10B", "10B", 32, 5120, 40),
        GPTPreset("GPT-20B", "20B", 32, 7168, 56),
        GPTPreset("GPT-40B", "40B", 38, 9216, 72),
        GPTPreset("GPT-60B", "60B", 56, 9216, 72),
        GPTPreset("GPT-80B", "80B", 42, 12288, 96),
        GPTPreset("GPT-160B", "160B", 84, 12288, 96),
        GPTPreset("GPT-320B", "320B", 96, 16384, 128),
        GPTPreset("GPT-640B", "640B", 192, 16384, 128),
    )
}


def get_preset(name: str) -> GPTPreset:
    key = name.upper()
    if not key.startswith("GPT-"):
        key = "GPT-" + key
    try:
        return GPT_PRESETS[key]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(GPT_PRESETS)}") from None


def block_dims(hidden: int) -> list[int]:
    return [hidden, 2 * hidden, hidden, 4 * hidden, hidden]


def preset_net(name: str, batch_rows: int, scale: int = 1, blocks: int | None = None) -> list[LayerSpec]:
    """FC chain for a preset; ``scale`` divides the hidden size, ``blocks`` truncates the depth."""
    p = get_preset(name)
    if p.hidden % scale:
        raise ConfigError(f"hidden size {p.hidden} of {p.name} is not divisible by scale {scale}")
    h = p.hidden // scale
    n_blocks = p.layers if blocks is None else blocks
    dims = [h]
    for _ in range(n_blocks):
        dims.extend(block_dims(h)[1:])
    return chain(batch_rows, dims)


def proxy_net(name: str, workers: int, blocks: int = 1, rows_per_worker: int = 4) -> list[LayerSpec]:
    """Desk-scale stand-in whose shapes divide evenly on every grid of ``workers``.

    The hidden size becomes ``hidden / 1024 * workers``, so presets keep their
    relative widths, and every block, shard and ring payload is a multiple of
    the group that splits it.  Analytical ring volumes are then whole numbers
    of elements.
    """
    p = get_preset(name)
    h = p.hidden // 1024 * workers
    dims = [h]
    for _ in range(blocks):
        dims.extend(block_dims(h)[1:])
    return chain(rows_per_worker * workers, dims)
