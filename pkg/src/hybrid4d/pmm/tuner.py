"""Pick the fastest of the NN / NT / TN storage modes for a local matmul by timing them."""
from __future__ import annotations

import statistics
import time
from typing import Callable

import numpy as np

from hybrid4d.pmm.layer import MODE_ORDER, MatmulMode, local_matmul

Timer = Callable[[MatmulMode, np.ndarray, np.ndarray], float]


def wallclock_timer(mode: MatmulMode, a: np.ndarray, b: np.ndarray) -> float:
    start = time.perf_counter()
    local_matmul(a, b, mode)
    return time.perf_counter() - start


def time_modes(
    shape: tuple[int, int, int],
    timer: Timer | None = None,
    trials: int = 5,
    seed: int = 0,
) -> dict[MatmulMode, float]:
    """Median time per mode over ``trials`` runs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    timer = timer or wallclock_timer
    m, k, n = shape
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (m, k)), rng.uniform(-1, 1, (k, n))
    return {mode: statistics.median(timer(mode, a, b) for _ in range(trials)) for mode in MODE_ORDER}


def select_mode(medians: dict[MatmulMode, float]) -> MatmulMode:
    # min() keeps the first of equal keys, so ties resolve NN < NT < TN
    return min(MODE_ORDER, key=lambda mode: medians[mode])


def tune_matmul_mode(
    shape: tuple[int, int, int],
    timer: Timer | None = None,
    trials: int = 5,
    seed: int = 0,
) -> MatmulMode:
    return select_mode(time_modes(shape, timer, trials, seed))


def mode_disagreement(shape: tuple[int, int, int], seed: int = 0) -> float:
    """Largest relative difference between the three modes' products."""
    m, k, n = shape
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (m, k)), rng.uniform(-1, 1, (k, n))
    results = [local_matmul(a, b, mode) for mode in MODE_ORDER]
    ref = max(float(np.max(np.abs(results[0]))), np.finfo(float).tiny)
    return max(float(np.max(np.abs(r - results[0]))) for r in results[1:]) / ref
