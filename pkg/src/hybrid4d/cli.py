"""Command-line entry point: ``hybrid4d {rank-configs,simulate,verify,tune,flops}``.

Configs are JSON; outputs are written as JSON plus CSV under ``--out``
(default ``$HYBRID4D_OUT`` or ``./out``).  Times are seconds, sizes bytes,
bandwidths GB/s in files.  Exit codes: 0 success, 1 bad input or failed
verification, 2 no feasible configuration.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import statistics
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from hybrid4d.errors import ConfigError, InfeasibleError, ShapeError
from hybrid4d.flops import PEAKS, efficiency, efficiency_csv, network_flops
from hybrid4d.grid import GridConfig, build_grid
from hybrid4d.overlap import OverlapFlags, build_schedule
from hybrid4d.perfmodel import effective_bandwidths, network_comm_estimates, rank_configs
from hybrid4d.pmm.network import alternate, check_chain, init_weights, network_step, sgd_update
from hybrid4d.pmm.sharding import LayerSpec, shard_weight
from hybrid4d.pmm.tuner import mode_disagreement, select_mode, time_modes
from hybrid4d.presets import preset_net
from hybrid4d.runner import local_dims, roofline_compute, simulated_comm, traffic_mismatches
from hybrid4d.simnet import ClusterSpec, Fabric
from hybrid4d.verify import run_suite

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE = 0, 1, 2
WARMUP = 2
EXECUTE_LIMIT = 4_000_000  # elements of weights + activations simulated numerically


def _dump(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("HYBRID4D_OUT", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_cluster(args) -> ClusterSpec:
    if args.cluster:
        return ClusterSpec.from_json(args.cluster)
    return ClusterSpec.synthetic(g_node=args.g_node)


def load_model(args) -> list[LayerSpec]:
    if args.model:
        try:
            spec = json.loads(Path(args.model).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.model}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read model file: {exc}") from exc
        try:
            rows = int(spec.get("batch_rows", args.batch_rows))
            if "dims" in spec:
                dims = [int(d) for d in spec["dims"]]
                net = [LayerSpec(rows, a, b) for a, b in zip(dims[:-1], dims[1:])]
            else:
                net = [LayerSpec(rows, int(l["k"]), int(l["n"])) for l in spec["layers"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed model spec: {exc!r}") from exc
        net = alternate(net)
        check_chain(net)
        return net
    if args.preset:
        return preset_net(args.preset, args.batch_rows, args.scale, args.blocks)
    raise ConfigError("give --model FILE or --preset NAME")


def _ranking_csv(ranking) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "g_x", "g_y", "g_z", "g_data", "predicted_s"])
    for idx, (cfg, t) in enumerate(ranking, 1):
        w.writerow([idx, *cfg.as_tuple(), repr(t)])
    return buf.getvalue()


def cmd_rank_configs(args) -> int:
    cluster, net = load_cluster(args), load_model(args)
    ranking = rank_configs(net, args.workers, cluster)
    out = _out_dir(args)
    (out / "ranking.csv").write_text(_ranking_csv(ranking))
    _dump(
        out / "ranking.json",
        {
            "workers": args.workers,
            "cluster": cluster.to_dict(),
            "ranking": [{"rank": i, "config": list(c.as_tuple()), "predicted_s": t} for i, (c, t) in enumerate(ranking, 1)],
        },
    )
    print(f"{'rank':>4}  {'gx,gy,gz,gdata':<16} predicted_s")
    for i, (cfg, t) in enumerate(ranking[: args.top], 1):
        print(f"{i:>4}  {str(cfg):<16} {t:.6g}")
    return EXIT_OK


def _choose_config(args, net, cluster) -> GridConfig:
    if args.config:
        cfg = GridConfig.parse(args.config)
        if cfg.total != args.workers:
            raise ConfigError(f"--config {cfg} has {cfg.total} workers, --workers is {args.workers}")
        for layer in net:
            layer.validate(cfg)
        return cfg
    return rank_configs(net, args.workers, cluster)[0][0]


def _execute(net, cfg, cluster, args):
    """Run the numeric iterations; returns losses, traffic, volume mismatches."""
    grid = build_grid(cfg.total, cfg, cluster.g_node)
    rng = np.random.default_rng(args.seed)
    weights = [shard_weight(w, grid, l) for w, l in zip(init_weights(net, args.seed), net)]
    batch = rng.uniform(-1, 1, (net[0].m, net[0].k))
    losses, fabric = [], None
    for _ in range(args.iterations):
        fabric = Fabric(grid, wire_bytes=args.bytes_per_element)
        step = network_step(net, weights, batch, grid, fabric)
        losses.append(step.loss)
        weights = sgd_update(weights, step.grad_shards, args.lr)
    return losses, fabric.report, traffic_mismatches(fabric.report, net, cfg, args.bytes_per_element)


def cmd_simulate(args) -> int:
    cluster, net = load_cluster(args), load_model(args)
    try:
        cfg = _choose_config(args, net, cluster)
    except ShapeError as exc:
        print(f"infeasible configuration: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    peak = PEAKS[args.peak].empirical
    grid = build_grid(cfg.total, cfg, cluster.g_node)
    compute = roofline_compute(net, cfg, peak)
    comm = simulated_comm(net, grid, cluster, args.bytes_per_element)
    model = network_comm_estimates(net, cfg, cluster, args.bytes_per_element)
    chosen = OverlapFlags.parse(args.overlap)

    per_flags = {}
    for flags in OverlapFlags.all_subsets():
        # every iteration replays the same deterministic schedule; warm-up ones are discarded
        times = [build_schedule(net, compute, comm, flags).batch_time() for _ in range(args.iterations)]
        tl = build_schedule(net, compute, comm, flags)
        per_flags[flags.label()] = {
            "batch_time_s": statistics.fmean(times[WARMUP:] or times),
            "compute_s": tl.total("compute"),
            "exposed_comm_s": tl.exposed_comm(),
        }
    timeline = build_schedule(net, compute, comm, chosen)

    out = _out_dir(args)
    metrics = {
        "config": list(cfg.as_tuple()),
        "workers": cfg.total,
        "iterations": args.iterations,
        "warmup": WARMUP,
        "overlap": chosen.label(),
        "batch_time_s": per_flags[chosen.label()]["batch_time_s"],
        "per_flag_set": per_flags,
        "model_comm_s": sum(e.t_comm for e in model),
        "simulated_comm_s": sum(e.t_comm for e in comm),
        "effective_bandwidths_gbps": {
            k: (v / 1e9 if np.isfinite(v) else None) for k, v in asdict(effective_bandwidths(cfg, cluster)).items()
        },
        "phase_comm_s": {
            "fwd": sum(e.t_ag_z + e.t_ar_y for e in comm),
            "bwd": sum(e.t_ar_x + e.t_rs_z for e in comm),
            "data-sync": sum(e.t_ar_data for e in comm),
        },
    }
    size = sum(l.k * l.n + l.m * l.n for l in net) + net[0].m * net[0].k
    if size <= EXECUTE_LIMIT:
        losses, traffic, mismatches = _execute(net, cfg, cluster, args)
        metrics["numerics"] = {
            "executed": True,
            "loss_per_iteration": losses,
            "traffic_total_bytes": traffic.total_bytes,
            "traffic_intra_bytes": traffic.intra_bytes,
            "traffic_inter_bytes": traffic.inter_bytes,
            "volume_mismatches": mismatches,
        }
        (out / "traffic.json").write_text(traffic.to_json() + "\n")
        (out / "traffic.csv").write_text(traffic.to_csv())
    else:
        metrics["numerics"] = {"executed": False, "reason": f"{size} elements exceeds {EXECUTE_LIMIT}"}
    _dump(out / "metrics.json", metrics)
    _dump(out / "timeline.json", timeline.to_dict())
    _dump(out / "trace.json", timeline.chrome_trace())

    print(f"config {cfg}  overlap {chosen.label()}")
    for label, row in per_flags.items():
        print(f"  {label:<14} batch {row['batch_time_s']:.6g} s  exposed comm {row['exposed_comm_s']:.6g} s")
    if metrics["numerics"]["executed"]:
        n_bad = len(metrics["numerics"]["volume_mismatches"])
        print(f"  traffic {metrics['numerics']['traffic_total_bytes']} B, volume mismatches: {n_bad}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_suite(args.max_workers, args.seed, args.g_node, fault="all_reduce" if args.inject_fault else None)
    failed = [r for r in results if not r.passed]
    out = _out_dir(args)
    _dump(
        out / "verify.json",
        {
            "seed": args.seed,
            "checks": len(results),
            "failed": len(failed),
            "results": [{**asdict(r), "fd_err": None if r.fd_err is None else float(r.fd_err)} for r in results],
        },
    )
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.config:<12} dims={r.dims} m={r.batch_rows} " + "; ".join(r.notes))
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_INPUT


def cmd_tune(args) -> int:
    cluster, net = load_cluster(args), load_model(args)
    cfg = _choose_config(args, net, cluster)
    rows = []
    seen = set()
    for layer in net:
        m, k, n = local_dims(layer, cfg)
        for op, shape in (("forward", (m, k, n)), ("grad_input", (m, n, k)), ("grad_weight", (k, m, n))):
            if (op, shape) in seen:
                continue
            seen.add((op, shape))
            medians = time_modes(shape, trials=args.trials, seed=args.seed)
            rows.append(
                {
                    "op": op,
                    "shape": list(shape),
                    "median_s": {mode.value: t for mode, t in medians.items()},
                    "selected": select_mode(medians).value,
                    "max_rel_disagreement": mode_disagreement(shape, args.seed),
                }
            )
    _dump(_out_dir(args) / "tune.json", {"config": list(cfg.as_tuple()), "results": rows})
    for r in rows:
        print(f"{r['op']:<12} {str(tuple(r['shape'])):<20} -> {r['selected']}")
    return EXIT_OK


def cmd_flops(args) -> int:
    out = _out_dir(args)
    peaks = PEAKS[args.peak]
    model_name = args.preset or (Path(args.model).stem if args.model else "model")
    if args.pflops is not None:
        flops, seconds = args.pflops * 1e15, 1.0
    else:
        net = load_model(args)
        flops = network_flops(net, recompute=args.recompute)
        seconds = args.seconds
    result = {"model": model_name, "flops_per_batch": flops, "recompute": args.recompute}
    if seconds:
        eff = efficiency(flops, seconds, args.workers, peaks)
        result.update(asdict(eff))
        (out / "flops.csv").write_text(efficiency_csv([(args.workers, model_name, eff)]))
        print(f"{args.workers} workers {model_name}: {eff.pflops:.1f} Pflop/s, "
              f"{eff.pct_advertised:.1f}% advertised, {eff.pct_empirical:.1f}% empirical")
    else:
        print(f"{model_name}: {flops:.6g} flops per batch")
    _dump(out / "flops.json", result)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--cluster", help="cluster JSON (default: synthetic 4-GPU nodes)")
    common.add_argument("--g-node", type=int, default=4, help="GPUs per node for the synthetic cluster")
    common.add_argument("--model", help="model JSON with batch_rows and dims or layers")
    common.add_argument("--preset", help="GPT preset name, e.g. GPT-20B")
    common.add_argument("--batch-rows", type=int, default=131072, help="global batch rows (sequences x tokens)")
    common.add_argument("--scale", type=int, default=1, help="divide the preset hidden size by this")
    common.add_argument("--blocks", type=int, help="truncate the preset to this many blocks")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--config", help='grid as "gx,gy,gz,gdata"')
    common.add_argument("--overlap", default="", help="comma list of oar,ors,oag (or all)")
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--out", help="output directory")
    common.add_argument("--bytes-per-element", type=int, default=2)
    common.add_argument("--peak", choices=sorted(PEAKS), default="a100")

    parser = argparse.ArgumentParser(prog="hybrid4d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rank-configs", parents=[common], help="rank grid configs by predicted comm time")
    p.add_argument("--top", type=int, default=20)
    p.set_defaults(func=cmd_rank_configs)

    p = sub.add_parser("simulate", parents=[common], help="simulate batch time and traffic for one config")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", parents=[common], help="oracle and gradient checks on all small grids")
    p.add_argument("--max-workers", type=int, default=16)
    p.add_argument("--inject-fault", action="store_true", help="corrupt all-reduce results (harness self-test)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("tune", parents=[common], help="time NN/NT/TN modes for the local matmuls")
    p.add_argument("--trials", type=int, default=5)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("flops", parents=[common], help="model flops and efficiency")
    p.add_argument("--recompute", action="store_true", help="count activation-checkpointing replay")
    p.add_argument("--seconds", type=float, help="batch time for efficiency reporting")
    p.add_argument("--pflops", type=float, help="sustained Pflop/s, bypassing the flop count")
    p.set_defaults(func=cmd_flops)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
