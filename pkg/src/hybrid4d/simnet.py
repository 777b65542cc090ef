"""In-memory ring collectives with byte accounting, and an event-driven timing engine.

Collectives really move data segment by segment around a ring, so the
per-rank byte counters are measurements, not formulas.  Timing is a separate
fluid simulation over ring plans: every ring advances step by step, a step
lasts as long as its slowest edge, and node-pair links are shared equally by
the rings crossing them.
"""
from __future__ import annotations

import csv
import io
import json
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from hybrid4d.errors import ConfigError, ProtocolError
from hybrid4d.grid import Axis, Grid, NodeMap, ProcessGroup

GB = 1e9

COLLECTIVE_STEPS = {"all_gather": 1, "reduce_scatter": 1, "all_reduce": 2}


@dataclass(frozen=True)
class ClusterSpec:
    """Node size and bandwidths in bytes/s.

    ``intra_table`` maps (inner_product, group_size) to the per-peer bandwidth
    measured when ``inner_product`` collectives of ``group_size`` workers run
    at once inside one node.
    """

    g_node: int
    beta_inter: float
    intra_table: Mapping[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        if self.g_node < 1:
            raise ConfigError(f"g_node must be >= 1, got {self.g_node}")
        if not self.beta_inter > 0:
            raise ConfigError(f"beta_inter must be > 0, got {self.beta_inter}")
        for (inner, size), bw in self.intra_table.items():
            if not bw > 0:
                raise ConfigError(f"intra bandwidth for {(inner, size)} must be > 0, got {bw}")
            if inner < 1 or size < 1 or inner * size > self.g_node:
                raise ConfigError(
                    f"intra table key {(inner, size)} does not fit in a node of {self.g_node}"
                )

    def intra(self, inner: int, size: int) -> float:
        try:
            return self.intra_table[(inner, size)]
        except KeyError:
            raise ConfigError(
                f"intra-node bandwidth table has no entry for (inner_product={inner}, group_size={size})"
            ) from None

    def scaled(self, factor: float) -> ClusterSpec:
        return ClusterSpec(
            self.g_node,
            self.beta_inter * factor,
            {key: bw * factor for key, bw in self.intra_table.items()},
        )

    @classmethod
    def synthetic(
        cls,
        g_node: int = 4,
        inter_gbps: float = 25.0,
        intra_gbps: float = 100.0,
        decay: float = 0.5,
    ) -> ClusterSpec:
        """Cluster whose intra-node bandwidth falls off as ``inner_product ** -decay``."""
        table = {}
        for inner in range(1, g_node + 1):
            for size in range(2, g_node // inner + 1):
                table[(inner, size)] = intra_gbps * GB / inner**decay
        return cls(g_node, inter_gbps * GB, table)

    def to_dict(self) -> dict:
        return {
            "g_node": self.g_node,
            "inter_gbps": self.beta_inter / GB,
            "intra_table": [
                {"inner_product": inner, "group_size": size, "gbps": bw / GB}
                for (inner, size), bw in sorted(self.intra_table.items())
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> ClusterSpec:
        try:
            g_node = int(data["g_node"])
            inter = float(data["inter_gbps"]) * GB
            table = {
                (int(row["inner_product"]), int(row["group_size"])): float(row["gbps"]) * GB
                for row in data.get("intra_table", [])
            }
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed cluster spec: {exc!r}") from exc
        return cls(g_node, inter, table)

    @classmethod
    def from_json(cls, path: str | Path) -> ClusterSpec:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(data)


@dataclass(frozen=True)
class RingPlan:
    members: tuple[int, ...]
    order: tuple[int, ...]
    crossings: int
    nodes: tuple[int, ...]  # node of each entry of ``order``

    def __len__(self) -> int:
        return len(self.order)

    def edges(self) -> list[tuple[int, int]]:
        """Directed (position, next position) pairs; empty for a singleton ring."""
        p = len(self.order)
        if p < 2:
            return []
        return [(q, (q + 1) % p) for q in range(p)]


def _members(group) -> tuple[int, ...]:
    if isinstance(group, ProcessGroup):
        return group.members
    if isinstance(group, RingPlan):
        return group.members
    return tuple(group)


def ring_order(group: ProcessGroup | Sequence[int], nodes: NodeMap) -> RingPlan:
    """Ring visiting each node's members consecutively, nodes in increasing id.

    A ring touching n > 1 nodes then crosses exactly n node boundaries, the
    minimum for a cycle through n nodes.
    """
    members = _members(group)
    if not members:
        raise ProtocolError("cannot build a ring for an empty group")
    order = tuple(sorted(members, key=lambda r: (nodes.node_of(r), r)))
    node_ids = tuple(nodes.node_of(r) for r in order)
    distinct = len(set(node_ids))
    return RingPlan(members, order, distinct if distinct > 1 else 0, node_ids)


# -- traffic accounting ------------------------------------------------------


@dataclass
class TrafficReport:
    per_rank: Counter = field(default_factory=Counter)
    intra_bytes: int = 0
    inter_bytes: int = 0
    events: list[dict] = field(default_factory=list)

    @property
    def total_bytes(self) -> int:
        return sum(self.per_rank.values())

    def filter(self, **labels) -> list[dict]:
        return [e for e in self.events if all(e.get(k) == v for k, v in labels.items())]

    def ops(self) -> set[tuple[str, str]]:
        """Distinct (op, axis) pairs that moved data."""
        return {(e["op"], e["axis"]) for e in self.events}

    def to_dict(self) -> dict:
        return {
            "total_bytes": self.total_bytes,
            "intra_bytes": self.intra_bytes,
            "inter_bytes": self.inter_bytes,
            "per_rank_bytes": {str(r): b for r, b in sorted(self.per_rank.items())},
            "events": self.events,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "bytes_sent"])
        for r, b in sorted(self.per_rank.items()):
            w.writerow([r, b])
        return buf.getvalue()


class Fabric:
    """Deterministic arena executing ring collectives over rank-local buffers.

    Rank programs are advanced in lock step by the caller; every collective is
    a synchronization point taking one buffer per member and returning one per
    member.  ``wire_bytes`` overrides the element size used for byte counts
    (e.g. 2 to account traffic as bf16 while computing in float64).
    """

    def __init__(self, nodes: NodeMap | Grid | None = None, wire_bytes: int | None = None, fault: str | None = None):
        if isinstance(nodes, Grid):
            nodes = nodes.nodes
        self.nodes = nodes if nodes is not None else NodeMap(1 << 30)
        self.wire_bytes = wire_bytes
        if fault is not None and fault not in COLLECTIVE_STEPS:
            raise ConfigError(f"unknown fault target {fault!r}")
        self.fault = fault
        self.report = TrafficReport()
        self._labels: dict = {}

    @contextmanager
    def scope(self, **labels):
        saved = self._labels
        self._labels = {**saved, **labels}
        try:
            yield
        finally:
            self._labels = saved

    def _plan(self, group) -> RingPlan:
        if isinstance(group, RingPlan):
            return group
        return ring_order(group, self.nodes)

    def _collect(self, plan: RingPlan, buffers: Mapping[int, np.ndarray]) -> list[np.ndarray]:
        missing = set(plan.members) - set(buffers)
        if missing:
            raise ProtocolError(f"no buffer supplied for ranks {sorted(missing)}")
        out = []
        for r in plan.members:
            a = np.asarray(buffers[r])
            if a.ndim != 1:
                raise ProtocolError(f"rank {r} buffer must be 1-D, got shape {a.shape}")
            out.append(a)
        return out

    def _itemsize(self, arrays: Sequence[np.ndarray]) -> int:
        return self.wire_bytes if self.wire_bytes is not None else arrays[0].dtype.itemsize

    def _record(self, op: str, group, plan: RingPlan, elements: int, sent: dict[int, int], intra: int, inter: int):
        for r, b in sent.items():
            self.report.per_rank[r] += b
        self.report.intra_bytes += intra
        self.report.inter_bytes += inter
        axis = group.axis.value if isinstance(group, ProcessGroup) else None
        self.report.events.append(
            {
                "op": op,
                "axis": axis,
                **self._labels,
                "members": list(plan.members),
                "elements": elements,
                "bytes_per_rank": [sent[r] for r in plan.members],
            }
        )

    def _send(self, sent, link, plan, q, nbytes):
        src = plan.order[q]
        dst_q = (q + 1) % len(plan.order)
        sent[src] += nbytes
        link["intra" if plan.nodes[q] == plan.nodes[dst_q] else "inter"] += nbytes

    def all_gather(self, group, shards: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
        """Every member receives the concatenation of all shards in member order."""
        plan = self._plan(group)
        arrays = self._collect(plan, shards)
        s = len(arrays[0])
        if any(len(a) != s for a in arrays):
            raise ProtocolError(f"all_gather shard lengths differ: {[len(a) for a in arrays]}")
        p = len(plan.order)
        if p == 1:
            return {plan.members[0]: arrays[0].copy()}
        item = self._itemsize(arrays)
        seg_of_pos = [plan.members.index(r) for r in plan.order]
        # held[q][c]: segment c as known at ring position q
        held = [{seg_of_pos[q]: arrays[seg_of_pos[q]].copy()} for q in range(p)]
        sent = {r: 0 for r in plan.members}
        link = {"intra": 0, "inter": 0}
        for step in range(p - 1):
            msgs = []
            for q in range(p):
                c = seg_of_pos[(q - step) % p]
                msgs.append(((q + 1) % p, c, held[q][c]))
                self._send(sent, link, plan, q, s * item)
            for dst, c, data in msgs:
                held[dst][c] = data.copy()
        out = {}
        for q, r in enumerate(plan.order):
            out[r] = np.concatenate([held[q][c] for c in range(p)])
        if self.fault == "all_gather":
            out[plan.members[-1]][0] += 1e-3
        self._record("all_gather", group, plan, s, sent, link["intra"], link["inter"])
        return out

    def reduce_scatter(self, group, vectors: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
        """Member c receives the sum of every member's c-th segment.

        Segment c is accumulated left to right starting at the ring position
        after its owner, so the result is bit-reproducible.
        """
        plan = self._plan(group)
        arrays = self._collect(plan, vectors)
        n = len(arrays[0])
        if any(len(a) != n for a in arrays):
            raise ProtocolError(f"reduce_scatter lengths differ: {[len(a) for a in arrays]}")
        p = len(plan.order)
        if n % p:
            raise ProtocolError(f"reduce_scatter length {n} not divisible by group size {p}")
        if p == 1:
            return {plan.members[0]: arrays[0].astype(np.float64, copy=True)}
        seg = n // p
        item = self._itemsize(arrays)
        seg_of_pos = [plan.members.index(r) for r in plan.order]
        local = [np.asarray(arrays[seg_of_pos[q]], dtype=np.float64) for q in range(p)]

        def piece(q, c):
            return local[q][c * seg:(c + 1) * seg]

        sent = {r: 0 for r in plan.members}
        link = {"intra": 0, "inter": 0}
        # partial[q] is the running sum destined for position q - 1 - step
        partial = {q: piece(q, seg_of_pos[(q - 1) % p]).copy() for q in range(p)}
        for step in range(p - 1):
            incoming = {}
            for q in range(p):
                self._send(sent, link, plan, q, seg * item)
                incoming[(q + 1) % p] = partial[q]
            partial = {q: incoming[q] + piece(q, seg_of_pos[(q - step - 2) % p]) for q in range(p)}
        out = {plan.order[q]: partial[q] for q in range(p)}
        if self.fault == "reduce_scatter":
            out[plan.members[-1]][0] += 1e-3
        self._record("reduce_scatter", group, plan, n, sent, link["intra"], link["inter"])
        return out

    def all_reduce(self, group, vectors: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
        """Reduce-scatter then all-gather; lengths are zero-padded to a multiple of the group size."""
        plan = self._plan(group)
        arrays = self._collect(plan, vectors)
        n = len(arrays[0])
        if any(len(a) != n for a in arrays):
            raise ProtocolError(f"all_reduce lengths differ: {[len(a) for a in arrays]}")
        p = len(plan.order)
        if p == 1:
            return {plan.members[0]: arrays[0].astype(np.float64, copy=True)}
        padded = -(-n // p) * p
        bufs = {
            r: np.concatenate([np.asarray(a, dtype=np.float64), np.zeros(padded - n)])
            for r, a in zip(plan.members, arrays)
        }
        before = len(self.report.events)
        saved_fault, self.fault = self.fault, None
        try:
            scattered = self.reduce_scatter(plan, bufs)
            gathered = self.all_gather(plan, scattered)
        finally:
            self.fault = saved_fault
        # fold the two phase events into one all_reduce event
        rs, ag = self.report.events[before:]
        del self.report.events[before:]
        self.report.events.append(
            {
                "op": "all_reduce",
                "axis": group.axis.value if isinstance(group, ProcessGroup) else None,
                **self._labels,
                "members": list(plan.members),
                "elements": n,
                "bytes_per_rank": [a + b for a, b in zip(rs["bytes_per_rank"], ag["bytes_per_rank"])],
            }
        )
        out = {r: v[:n] for r, v in gathered.items()}
        if self.fault == "all_reduce":
            out[plan.members[-1]][0] += 1e-3
        return out


def ring_volume(op: str, p: int, elements: int) -> float:
    """Per-rank elements sent by the ring algorithm (``elements`` = shard for all_gather, vector otherwise)."""
    if p <= 1:
        return 0
    if op == "all_gather":
        return (p - 1) * elements
    if op == "reduce_scatter":
        return (p - 1) * elements / p
    if op == "all_reduce":
        return 2 * (p - 1) * elements / p
    raise ValueError(f"unknown collective {op!r}")


# -- timing ------------------------------------------------------------------


def _edge_bandwidths(plans: Sequence[RingPlan], active: Sequence[int], cluster: ClusterSpec) -> dict[int, list[float]]:
    pair_users: Counter = Counter()
    node_users: Counter = Counter()
    for idx in active:
        plan = plans[idx]
        pairs, local_nodes = set(), set()
        for q, nq in plan.edges():
            a, b = plan.nodes[q], plan.nodes[nq]
            if a == b:
                local_nodes.add(a)
            else:
                pairs.add((min(a, b), max(a, b)))
        pair_users.update(pairs)
        node_users.update(local_nodes)
    out = {}
    for idx in active:
        plan = plans[idx]
        per_node = Counter(plan.nodes)
        bws = []
        for q, nq in plan.edges():
            a, b = plan.nodes[q], plan.nodes[nq]
            if a == b:
                bws.append(cluster.intra(node_users[a], per_node[a]))
            else:
                sharers = min(pair_users[(min(a, b), max(a, b))], cluster.g_node)
                bws.append(cluster.beta_inter / sharers)
        out[idx] = bws
    return out


def simulate_rings(
    plans: Sequence[RingPlan],
    nbytes: Sequence[float],
    cluster: ClusterSpec,
    kinds: Sequence[str] | str = "all_gather",
) -> list[float]:
    """Finish time of each concurrently started ring collective.

    ``nbytes[i]`` is the full buffer size of collective i (the gathered size
    for all-gather, the input size otherwise).  Zero startup latency.
    """
    if isinstance(kinds, str):
        kinds = [kinds] * len(plans)
    finish = [0.0] * len(plans)
    remaining = {}
    for idx, (plan, b, kind) in enumerate(zip(plans, nbytes, kinds)):
        if b < 0:
            raise ValueError(f"negative payload {b}")
        p = len(plan)
        if p > 1 and b > 0:
            remaining[idx] = float(COLLECTIVE_STEPS[kind] * (p - 1))
    now = 0.0
    while remaining:
        active = sorted(remaining)
        bws = _edge_bandwidths(plans, active, cluster)
        step_time = {idx: max(nbytes[idx] / len(plans[idx]) / bw for bw in bws[idx]) for idx in active}
        dt = min(remaining[idx] * step_time[idx] for idx in active)
        now += dt
        for idx in active:
            remaining[idx] -= dt / step_time[idx]
            if remaining[idx] <= 1e-9 * COLLECTIVE_STEPS[kinds[idx]] * len(plans[idx]):
                del remaining[idx]
                finish[idx] = now
    return finish


def simulate_collective_time(
    plan: RingPlan,
    nbytes: float,
    cluster: ClusterSpec,
    concurrent: Iterable[RingPlan] = (),
    kind: str = "all_gather",
) -> float:
    """Duration of one ring collective while ``concurrent`` rings run the same collective."""
    plans = [plan, *concurrent]
    return simulate_rings(plans, [nbytes] * len(plans), cluster, kind)[0]


def axis_collective_time(grid: Grid, axis: Axis, nbytes: float, cluster: ClusterSpec, kind: str) -> float:
    """Time for every group along ``axis`` to run the same collective at once."""
    plans = [ring_order(g, grid.nodes) for g in grid.groups(axis)]
    if len(plans[0]) == 1 or nbytes == 0:
        return 0.0
    return max(simulate_rings(plans, [nbytes] * len(plans), cluster, kind))
