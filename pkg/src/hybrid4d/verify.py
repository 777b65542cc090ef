"""Oracle-equivalence and finite-difference checks over every grid up to a worker count."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from hybrid4d.grid import GridConfig, build_grid, enumerate_configs
from hybrid4d.pmm.network import alternate, network_step
from hybrid4d.pmm.sharding import LayerSpec
from hybrid4d.simnet import Fabric


def serial_step(weights: Sequence[np.ndarray], batch: np.ndarray):
    """Plain numpy forward/backward of the linear stack with mean-squared loss."""
    acts = [batch]
    for w in weights:
        acts.append(acts[-1] @ w)
    out = acts[-1]
    grad = 2.0 * out / out.size
    grads = [None] * len(weights)
    for idx in reversed(range(len(weights))):
        grads[idx] = acts[idx].T @ grad
        grad = grad @ weights[idx].T
    return float(np.mean(out**2)), out, grad, grads


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    scale = float(np.max(np.abs(want))) if want.size else 0.0
    diff = float(np.max(np.abs(got - want))) if want.size else 0.0
    return diff / scale if scale > 0 else diff


def random_instance(config: GridConfig, rng: np.random.Generator, max_dim: int = 32, max_layers: int = 3, tries: int = 200):
    """Random chained net whose shapes divide evenly on ``config``, or None."""
    gx, gy, gz, gd = config.as_tuple()
    rows = gd * gz
    if rows > max_dim:
        return None
    for _ in range(tries):
        n_layers = int(rng.integers(1, max_layers + 1))
        dims = []
        for i in range(n_layers + 1):
            base = gy if i % 2 == 0 else gx
            if base > max_dim:
                break
            dims.append(base * int(rng.integers(1, max_dim // base + 1)))
        if len(dims) != n_layers + 1:
            return None
        m = rows * int(rng.integers(1, max_dim // rows + 1))
        net = alternate([LayerSpec(m, a, b) for a, b in zip(dims[:-1], dims[1:])])
        if all(layer.fits(config) for layer in net):
            weights = [rng.uniform(-1, 1, (l.k, l.n)) for l in net]
            batch = rng.uniform(-1, 1, (m, dims[0]))
            return net, weights, batch
    return None


@dataclass
class CheckResult:
    config: str
    dims: list[int]
    batch_rows: int
    forward_err: float
    grad_err: float
    fd_err: float | None = None
    passed: bool = True
    notes: list[str] = field(default_factory=list)


def finite_difference_check(net, weights, batch, grid, analytic, rng, samples=4, step=1e-5) -> float:
    """Worst relative error between analytic gradients and central differences of the distributed loss."""
    worst = 0.0
    for li, w in enumerate(weights):
        for _ in range(samples):
            r, c = int(rng.integers(w.shape[0])), int(rng.integers(w.shape[1]))
            plus = [x.copy() for x in weights]
            minus = [x.copy() for x in weights]
            plus[li][r, c] += step
            minus[li][r, c] -= step
            lp = network_step(net, plus, batch, grid).loss
            lm = network_step(net, minus, batch, grid).loss
            fd = (lp - lm) / (2 * step)
            an = analytic[li][r, c]
            denom = max(abs(fd), abs(an), 1e-8)
            worst = max(worst, abs(fd - an) / denom)
    return worst


def run_suite(
    max_workers: int = 16,
    seed: int = 42,
    g_node: int = 4,
    fault: str | None = None,
    tol: float = 1e-10,
    fd_tol: float = 1e-4,
    fd_every: int = 4,
) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    count = 0
    for total in range(1, max_workers + 1):
        for cfg in enumerate_configs(total):
            inst = random_instance(cfg, rng)
            if inst is None:
                continue
            net, weights, batch = inst
            grid = build_grid(total, cfg, g_node)
            step = network_step(net, weights, batch, grid, Fabric(grid, fault=fault))
            _, out, gin, grads = serial_step(weights, batch)
            fwd = rel_err(step.output, out)
            gerr = max([rel_err(g, w) for g, w in zip(step.weight_grads, grads)] + [rel_err(step.input_grad, gin)])
            res = CheckResult(str(cfg), [net[0].k] + [l.n for l in net], net[0].m, fwd, gerr)
            if count % fd_every == 0:
                res.fd_err = finite_difference_check(net, weights, batch, grid, step.weight_grads, rng)
            count += 1
            if fwd > tol:
                res.notes.append(f"forward error {fwd:.3g} > {tol:g}")
            if gerr > tol:
                res.notes.append(f"gradient error {gerr:.3g} > {tol:g}")
            if res.fd_err is not None and res.fd_err > fd_tol:
                res.notes.append(f"finite-difference error {res.fd_err:.3g} > {fd_tol:g}")
            res.passed = not res.notes
            results.append(res)
    return results
