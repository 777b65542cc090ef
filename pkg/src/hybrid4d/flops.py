"""Model-flop counting for FC stacks and sustained-throughput efficiency."""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

from hybrid4d.pmm.sharding import LayerSpec

TERA = 1e12
PETA = 1e15


@dataclass(frozen=True)
class PeakSpec:
    """Per-worker peak flop/s: vendor-advertised and empirically attainable."""

    advertised: float
    empirical: float

    def __post_init__(self):
        if not (0 < self.empirical <= self.advertised):
            warnings.warn(
                f"expected 0 < empirical ({self.empirical}) <= advertised ({self.advertised})",
                stacklevel=2,
            )


# bf16 peaks per GPU (per GCD for MI250X)
PEAKS = {
    "a100": PeakSpec(312 * TERA, 280 * TERA),
    "mi250x-gcd": PeakSpec(191.5 * TERA, 125 * TERA),
    "h100": PeakSpec(989 * TERA, 813 * TERA),
}


def layer_flops(layer: LayerSpec, batch_rows: int | None = None, recompute: bool = False) -> int:
    m = layer.m if batch_rows is None else batch_rows
    # forward + two backward matmuls, plus one forward replay under activation checkpointing
    passes = 4 if recompute else 3
    return passes * 2 * m * layer.k * layer.n


def network_flops(net: Sequence[LayerSpec], batch_rows: int | None = None, recompute: bool = False) -> int:
    return sum(layer_flops(layer, batch_rows, recompute) for layer in net)


@dataclass(frozen=True)
class Efficiency:
    pflops: float
    pct_advertised: float
    pct_empirical: float


def efficiency(flops: float, seconds: float, workers: int, peaks: PeakSpec) -> Efficiency:
    if seconds <= 0:
        raise ValueError(f"seconds must be > 0, got {seconds}")
    rate = flops / seconds
    return Efficiency(
        pflops=rate / PETA,
        pct_advertised=100.0 * rate / (workers * peaks.advertised),
        pct_empirical=100.0 * rate / (workers * peaks.empirical),
    )


CSV_COLUMNS = ("workers", "model", "total_pflops", "pct_advertised", "pct_empirical")


def efficiency_csv(rows: Iterable[tuple[int, str, Efficiency]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for workers, model, eff in rows:
        w.writerow([workers, model, f"{eff.pflops:.1f}", f"{eff.pct_advertised:.1f}", f"{eff.pct_empirical:.1f}"])
    return buf.getvalue()
