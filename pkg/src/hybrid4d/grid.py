"""4D virtual worker grid: rank <-> coordinate maps, process groups, node placement.

Ranks are laid out hierarchically with X innermost, then Y, Z and DATA
outermost, so rank = i + g_x * (j + g_y * (k + g_z * d)).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable, NamedTuple

from hybrid4d.errors import ConfigError


class Axis(enum.Enum):
    X = "x"
    Y = "y"
    Z = "z"
    DATA = "data"

    @classmethod
    def parse(cls, name: str | Axis) -> Axis:
        if isinstance(name, Axis):
            return name
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigError(f"unknown axis {name!r}") from None


HIERARCHY = (Axis.X, Axis.Y, Axis.Z, Axis.DATA)


@dataclass(frozen=True, order=True)
class GridConfig:
    g_x: int
    g_y: int
    g_z: int
    g_data: int = 1

    def __post_init__(self):
        for name, value in zip(("g_x", "g_y", "g_z", "g_data"), self.as_tuple()):
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")

    @classmethod
    def parse(cls, text: str) -> GridConfig:
        """Parse ``"gx,gy,gz,gdata"`` (the data factor may be omitted)."""
        try:
            parts = [int(p) for p in text.replace("x", ",").split(",") if p.strip()]
        except ValueError:
            raise ConfigError(f"cannot parse grid config {text!r}") from None
        if len(parts) not in (3, 4):
            raise ConfigError(f"grid config needs 3 or 4 factors, got {text!r}")
        return cls(*parts)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.g_x, self.g_y, self.g_z, self.g_data)

    def extent(self, axis: Axis) -> int:
        return self.as_tuple()[HIERARCHY.index(Axis.parse(axis))]

    @property
    def total(self) -> int:
        return self.g_x * self.g_y * self.g_z * self.g_data

    @property
    def tensor(self) -> int:
        return self.g_x * self.g_y * self.g_z

    def __str__(self) -> str:
        return ",".join(str(v) for v in self.as_tuple())


class Coords(NamedTuple):
    i: int
    j: int
    k: int
    d: int


@dataclass(frozen=True)
class ProcessGroup:
    axis: Axis
    members: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def index(self, rank: int) -> int:
        return self.members.index(rank)


@dataclass(frozen=True)
class NodeMap:
    """Block placement: ranks [n*g_node, (n+1)*g_node) live on node n."""

    g_node: int

    def __post_init__(self):
        if self.g_node < 1:
            raise ConfigError(f"g_node must be >= 1, got {self.g_node}")

    def node_of(self, rank: int) -> int:
        return rank // self.g_node


class Grid:
    """Immutable 4D grid of ``config.total`` workers placed on nodes of ``g_node``."""

    def __init__(self, config: GridConfig, g_node: int | None = None):
        self.config = config
        self.size = config.total
        self.nodes = NodeMap(g_node if g_node is not None else self.size)

    def __repr__(self) -> str:
        return f"Grid({self.config}, g_node={self.nodes.g_node})"

    def rank_to_coords(self, rank: int) -> Coords:
        if not 0 <= rank < self.size:
            raise IndexError(f"rank {rank} outside [0, {self.size})")
        gx, gy, gz, _ = self.config.as_tuple()
        return Coords(rank % gx, (rank // gx) % gy, (rank // (gx * gy)) % gz, rank // (gx * gy * gz))

    def coords_to_rank(self, coords: Coords | tuple[int, int, int, int]) -> int:
        i, j, k, d = coords
        gx, gy, gz, gd = self.config.as_tuple()
        if not (0 <= i < gx and 0 <= j < gy and 0 <= k < gz and 0 <= d < gd):
            raise IndexError(f"coords {tuple(coords)} outside grid {self.config}")
        return i + gx * (j + gy * (k + gz * d))

    def coord(self, rank: int, axis: Axis) -> int:
        return self.rank_to_coords(rank)[HIERARCHY.index(Axis.parse(axis))]

    @cached_property
    def _groups(self) -> dict[Axis, tuple[ProcessGroup, ...]]:
        out = {}
        for pos, axis in enumerate(HIERARCHY):
            extent = self.config.as_tuple()[pos]
            seen: dict[tuple, list[int]] = {}
            for rank in range(self.size):
                c = list(self.rank_to_coords(rank))
                c[pos] = 0
                seen.setdefault(tuple(c), []).append(rank)
            groups = sorted(seen.values(), key=lambda m: m[0])
            assert all(len(m) == extent for m in groups)
            out[axis] = tuple(ProcessGroup(axis, tuple(m)) for m in groups)
        return out

    def groups(self, axis: Axis | str) -> list[ProcessGroup]:
        """Disjoint groups along ``axis``; members ordered by their coordinate on it."""
        return list(self._groups[Axis.parse(axis)])

    def group_of(self, rank: int, axis: Axis | str) -> ProcessGroup:
        axis = Axis.parse(axis)
        for g in self._groups[axis]:
            if rank in g.members:
                return g
        raise IndexError(rank)

    def node_of(self, rank: int) -> int:
        return self.nodes.node_of(rank)


def build_grid(total_workers: int, config: GridConfig, g_node: int | None = None) -> Grid:
    if total_workers != config.total:
        raise ConfigError(
            f"grid factors {config} multiply to {config.total}, expected {total_workers} workers"
        )
    if g_node is not None and g_node < 1:
        raise ConfigError(f"g_node must be >= 1, got {g_node}")
    return Grid(config, g_node)


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


ConfigPredicate = Callable[[GridConfig], bool]


def enumerate_configs(total_workers: int, constraints: Iterable[ConfigPredicate] = ()) -> list[GridConfig]:
    """All ordered (g_x, g_y, g_z, g_data) with product ``total_workers``, lexicographic."""
    if total_workers < 1:
        raise ConfigError(f"total_workers must be >= 1, got {total_workers}")
    constraints = list(constraints)
    out = []
    for gx in _divisors(total_workers):
        r1 = total_workers // gx
        for gy in _divisors(r1):
            r2 = r1 // gy
            for gz in _divisors(r2):
                cfg = GridConfig(gx, gy, gz, r2 // gz)
                if all(pred(cfg) for pred in constraints):
                    out.append(cfg)
    return out
