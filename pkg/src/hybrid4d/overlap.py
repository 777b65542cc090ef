"""Per-iteration event timelines with optional overlap of collectives and compute.

The schedule is produced by replaying the host program of one training
iteration.  Compute runs on a single stream; each collective axis is its own
communication resource.  A collective starts once it is issued, its inputs are
ready and its resource is free; the host blocks on it at its wait point.
The three overlap flags only move wait points later (OAR, ORS) or issue
points earlier (OAG), which is why enabling a flag can never slow a schedule
down.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Sequence

from hybrid4d.perfmodel import CommEstimate
from hybrid4d.pmm.sharding import LayerSpec


@dataclass(frozen=True)
class OverlapFlags:
    oar: bool = False
    ors: bool = False
    oag: bool = False

    @classmethod
    def parse(cls, text: str | None) -> OverlapFlags:
        if not text or text.strip().lower() in ("", "none", "baseline"):
            return cls()
        names = {t.strip().lower() for t in text.split(",") if t.strip()}
        if names == {"all"}:
            return cls(True, True, True)
        unknown = names - {"oar", "ors", "oag"}
        if unknown:
            raise ValueError(f"unknown overlap flags: {sorted(unknown)}")
        return cls(**{name: True for name in names})

    @classmethod
    def all_subsets(cls) -> list[OverlapFlags]:
        names = ("oar", "ors", "oag")
        out = []
        for r in range(4):
            for combo in combinations(names, r):
                out.append(cls(**{n: True for n in combo}))
        return out

    def label(self) -> str:
        on = [n for n in ("oar", "ors", "oag") if getattr(self, n)]
        return "+".join(on) if on else "baseline"

    def __le__(self, other: OverlapFlags) -> bool:
        return all(not getattr(self, n) or getattr(other, n) for n in ("oar", "ors", "oag"))


@dataclass(frozen=True)
class LayerCompute:
    """Seconds of the three local matmuls of one layer."""

    fwd: float
    bwd_input: float
    bwd_weight: float

    @property
    def total(self) -> float:
        return self.fwd + self.bwd_input + self.bwd_weight


@dataclass
class Event:
    id: int
    name: str
    kind: str  # "compute" | "comm"
    layer: int
    phase: str  # "fwd" | "bwd" | "data-sync"
    resource: str
    start: float
    end: float
    deps: list[int] = field(default_factory=list)

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class Timeline:
    events: list[Event] = field(default_factory=list)

    def batch_time(self) -> float:
        return max((e.end for e in self.events), default=0.0)

    def total(self, kind: str) -> float:
        return sum(e.duration for e in self.events if e.kind == kind)

    def exposed_comm(self) -> float:
        """Batch time not covered by compute."""
        return self.batch_time() - self.total("compute")

    def check(self) -> None:
        """Raise AssertionError if dependencies or resource exclusivity are violated."""
        by_id = {e.id: e for e in self.events}
        for e in self.events:
            for d in e.deps:
                assert d < e.id, f"{e.name} depends on later event {by_id[d].name}"
                assert by_id[d].end <= e.start, f"{e.name} starts before {by_id[d].name} ends"
        per_res: dict[str, list[Event]] = {}
        for e in self.events:
            per_res.setdefault(e.resource, []).append(e)
        for evs in per_res.values():
            for a, b in zip(evs, evs[1:]):
                assert a.end <= b.start, f"{a.name} and {b.name} overlap on {a.resource}"

    def to_dict(self) -> dict:
        return {"batch_time": self.batch_time(), "events": [asdict(e) for e in self.events]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def chrome_trace(self) -> dict:
        return {
            "traceEvents": [
                {
                    "name": e.name,
                    "cat": e.kind,
                    "ph": "X",
                    "ts": e.start * 1e6,
                    "dur": e.duration * 1e6,
                    "pid": 0,
                    "tid": e.resource,
                    "args": {"layer": e.layer, "phase": e.phase},
                }
                for e in self.events
            ]
        }


class _Replay:
    def __init__(self):
        self.timeline = Timeline()
        self.host = 0.0
        self.free: dict[str, float] = {}
        self.last_on: dict[str, int] = {}

    def _add(self, name, kind, layer, phase, resource, duration, deps):
        deps = [d for d in deps if d is not None]
        start = max([self.host, self.free.get(resource, 0.0)] + [self.timeline.events[d].end for d in deps])
        if resource in self.last_on:
            deps.append(self.last_on[resource])
        ev = Event(len(self.timeline.events), name, kind, layer, phase, resource, start, start + duration, sorted(set(deps)))
        self.timeline.events.append(ev)
        self.free[resource] = ev.end
        self.last_on[resource] = ev.id
        return ev.id

    def compute(self, name, layer, phase, duration, deps=()):
        eid = self._add(name, "compute", layer, phase, "compute", duration, list(deps))
        self.host = self.timeline.events[eid].end
        return eid

    def issue(self, name, layer, phase, axis, duration, deps=()):
        return self._add(name, "comm", layer, phase, axis, duration, list(deps))

    def wait(self, eid):
        self.host = max(self.host, self.timeline.events[eid].end)


def build_schedule(
    net: Sequence[LayerSpec] | int,
    per_layer_compute: Sequence[LayerCompute],
    per_layer_comm: Sequence[CommEstimate],
    flags: OverlapFlags = OverlapFlags(),
) -> Timeline:
    """Timeline of one iteration: forward, backward, then data-parallel gradient sync."""
    if isinstance(net, int):
        transposed = [bool(i % 2) for i in range(net)]
    else:
        transposed = [layer.transposed for layer in net]
    L = len(transposed)
    if not (len(per_layer_compute) == len(per_layer_comm) == L):
        raise ValueError("need one compute and one comm entry per layer")
    for c in per_layer_compute:
        if min(c.fwd, c.bwd_input, c.bwd_weight) < 0:
            raise ValueError("compute times must be non-negative")
    fwd_axis = ["x" if t else "y" for t in transposed]
    bwd_axis = ["y" if t else "x" for t in transposed]

    rp = _Replay()
    ag: list[int | None] = [None] * L
    ar_fwd: list[int | None] = [None] * L
    for l in range(L):
        comm, comp = per_layer_comm[l], per_layer_compute[l]
        if ag[l] is None:
            ag[l] = rp.issue(f"all_gather_z[{l}]", l, "fwd", "z", comm.t_ag_z)
        if flags.oag and l + 1 < L:
            ag[l + 1] = rp.issue(f"all_gather_z[{l + 1}]", l + 1, "fwd", "z", per_layer_comm[l + 1].t_ag_z)
        rp.wait(ag[l])
        f = rp.compute(f"fwd[{l}]", l, "fwd", comp.fwd, [ag[l], ar_fwd[l - 1] if l else None])
        ar_fwd[l] = rp.issue(f"all_reduce_{fwd_axis[l]}[{l}]", l, "fwd", fwd_axis[l], comm.t_ar_y, [f])
        rp.wait(ar_fwd[l])

    grad_src = ar_fwd[L - 1] if L else None
    rs: list[int] = []
    for l in reversed(range(L)):
        comm, comp = per_layer_comm[l], per_layer_compute[l]
        di = rp.compute(f"bwd_input[{l}]", l, "bwd", comp.bwd_input, [grad_src])
        ar = rp.issue(f"all_reduce_{bwd_axis[l]}[{l}]", l, "bwd", bwd_axis[l], comm.t_ar_x, [di])
        if not flags.oar:
            rp.wait(ar)
        dw = rp.compute(f"bwd_weight[{l}]", l, "bwd", comp.bwd_weight, [grad_src])
        if flags.oar:
            rp.wait(ar)
        r = rp.issue(f"reduce_scatter_z[{l}]", l, "bwd", "z", comm.t_rs_z, [dw])
        if not flags.ors:
            rp.wait(r)
        rs.append(r)
        grad_src = ar
    for r in rs:
        rp.wait(r)

    for l, r in zip(reversed(range(L)), rs):
        d = rp.issue(f"all_reduce_data[{l}]", l, "data-sync", "data", per_layer_comm[l].t_ar_data, [r])
        rp.wait(d)
    return rp.timeline


def batch_time(timeline: Timeline) -> float:
    return timeline.batch_time()


def fits_windows(per_layer_compute: Sequence[LayerCompute], per_layer_comm: Sequence[CommEstimate]) -> bool:
    """Sufficient condition for all communication to hide under compute with every flag on.

    Collectives that stay on the critical path regardless of flags (first
    all-gather, forward all-reduces, last reduce-scatter, data-parallel sync)
    must be free; every other collective must fit the compute it overlaps.
    """
    c, t = per_layer_compute, per_layer_comm
    L = len(t)
    if L == 0:
        return True
    if t[0].t_ag_z > 0 or t[0].t_rs_z > 0:
        return False
    if any(e.t_ar_y > 0 or e.t_ar_data > 0 for e in t):
        return False
    for l in range(L):
        if l + 1 < L and t[l + 1].t_ag_z > c[l].fwd:
            return False
        if t[l].t_ar_x > c[l].bwd_weight:
            return False
        if l > 0 and t[l].t_rs_z > c[l - 1].bwd_input + c[l - 1].bwd_weight:
            return False
    return True
