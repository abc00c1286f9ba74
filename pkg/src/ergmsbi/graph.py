"""Undirected simple graphs, ERGM summary statistics and change statistics.

The statistics are the edge count and the geometrically weighted edgewise /
non-edgewise shared partner counts (GWESP / GWNSP) with decay ``tau``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STATISTICS = ("edges", "gwesp", "gwnsp")
DEFAULT_DECAY = 0.75


@dataclass(frozen=True)
class StatsConfig:
    decay: float = DEFAULT_DECAY
    stat_set: tuple[str, ...] = STATISTICS

    def __post_init__(self):
        stat_set = tuple(self.stat_set)
        object.__setattr__(self, "stat_set", stat_set)
        if not stat_set:
            raise ValueError("stat_set must be nonempty")
        if len(set(stat_set)) != len(stat_set):
            raise ValueError(f"duplicate statistics in {stat_set}")
        unknown = set(stat_set) - set(STATISTICS)
        if unknown:
            raise ValueError(f"unknown statistics {sorted(unknown)}")
        if not (self.decay >= 0 and math.isfinite(self.decay)):
            raise ValueError(f"decay must be a finite nonnegative number, got {self.decay}")

    @property
    def dim(self) -> int:
        return len(self.stat_set)

    @property
    def index(self) -> np.ndarray:
        """Positions of the enabled statistics within ``STATISTICS``."""
        return np.array([STATISTICS.index(s) for s in self.stat_set], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected simple graph on ``n`` vertices stored as a dense boolean matrix.

    Treat instances as values: operations return new graphs and never mutate
    ``adj`` in place.
    """

    n: int
    adj: np.ndarray = field(repr=False)

    def __post_init__(self):
        adj = np.asarray(self.adj, dtype=bool)
        if adj.shape != (self.n, self.n):
            raise ValueError(f"adjacency shape {adj.shape} does not match n={self.n}")
        if np.any(np.diag(adj)) or not np.array_equal(adj, adj.T):
            raise ValueError("adjacency must be symmetric with an empty diagonal")
        adj.setflags(write=False)
        object.__setattr__(self, "adj", adj)

    @classmethod
    def _trusted(cls, n: int, adj: np.ndarray) -> Graph:
        """Wrap an adjacency matrix already known to be valid, skipping checks."""
        g = object.__new__(cls)
        adj.setflags(write=False)
        object.__setattr__(g, "n", n)
        object.__setattr__(g, "adj", adj)
        return g

    @classmethod
    def empty(cls, n: int) -> Graph:
        if n < 1:
            raise ValueError(f"vertex count must be positive, got {n}")
        return cls(n, np.zeros((n, n), dtype=bool))

    @classmethod
    def complete(cls, n: int) -> Graph:
        return cls(n, ~np.eye(n, dtype=bool))

    @classmethod
    def from_edges(cls, n: int, edges) -> Graph:
        adj = np.zeros((n, n), dtype=bool)
        for i, j in edges:
            _check_pair(n, i, j)
            adj[i, j] = adj[j, i] = True
        return cls(n, adj)

    @property
    def edge_count(self) -> int:
        return int(np.count_nonzero(self.adj)) // 2

    def has_edge(self, i: int, j: int) -> bool:
        return bool(self.adj[i, j])

    def degree(self) -> np.ndarray:
        return self.adj.sum(axis=1)

    def neighbours(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adj[i])

    def edges(self) -> list[tuple[int, int]]:
        iu, ju = np.nonzero(np.triu(self.adj, 1))
        return list(zip(iu.tolist(), ju.tolist()))

    def relabel(self, perm) -> Graph:
        """Graph with vertex ``v`` renamed to ``perm[v]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        return Graph(self.n, self.adj[np.ix_(inv, inv)])

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.adj, other.adj)

    def __hash__(self):
        return hash((self.n, np.packbits(self.adj).tobytes()))


@dataclass(frozen=True)
class SharedPartnerProfile:
    """Shared-partner counts; entry ``i - 1`` holds pairs sharing exactly ``i`` neighbours."""

    connected: np.ndarray
    nonconnected: np.ndarray


def _check_pair(n: int, i: int, j: int):
    if i == j:
        raise ValueError(f"self-loop ({i}, {j}) is not allowed")
    if not (0 <= i < n and 0 <= j < n):
        raise ValueError(f"vertex pair ({i}, {j}) out of range for n={n}")


def toggle_edge(g: Graph, i: int, j: int) -> Graph:
    _check_pair(g.n, i, j)
    adj = g.adj.copy()
    adj[i, j] = adj[j, i] = not adj[i, j]
    return Graph(g.n, adj)


@functools.lru_cache(maxsize=64)
def gw_weights(n: int, decay: float) -> np.ndarray:
    """Kernel weights ``w[c]`` for a pair sharing ``c`` partners, ``c = 0..n-2``.

    ``w[0]`` is zero. Powers of ``1 - exp(-decay)`` are built by repeated
    multiplication so every code path sees identical doubles.
    """
    if decay < 0:
        raise ValueError(f"decay must be nonnegative, got {decay}")
    size = max(n - 1, 1)
    w = np.zeros(size)
    r = 1.0 - math.exp(-decay)
    scale = math.exp(decay)
    power = 1.0
    for c in range(1, size):
        power *= r
        w[c] = scale * (1.0 - power)
    w.setflags(write=False)
    return w


def gw_statistic(counts, decay: float) -> float:
    """Geometrically weighted sum of a shared-partner profile vector (index origin 1)."""
    if decay < 0:
        raise ValueError(f"decay must be nonnegative, got {decay}")
    counts = np.asarray(counts, dtype=float)
    w = gw_weights(len(counts) + 2, decay)
    return float(np.dot(w[1:], counts))


def shared_partner_profile(g: Graph) -> SharedPartnerProfile:
    n = g.n
    a = g.adj.astype(np.int64)
    common = a @ a
    iu, ju = np.triu_indices(n, 1)
    c = common[iu, ju]
    linked = g.adj[iu, ju]
    size = max(n - 2, 0)
    connected = np.bincount(c[linked], minlength=n)[1 : size + 1]
    nonconnected = np.bincount(c[~linked], minlength=n)[1 : size + 1]
    return SharedPartnerProfile(connected.astype(np.int64), nonconnected.astype(np.int64))


def summary_stats(g: Graph, cfg: StatsConfig) -> np.ndarray:
    """Statistics vector h(g) ordered as ``cfg.stat_set``."""
    full = np.zeros(3)
    full[0] = g.edge_count
    if "gwesp" in cfg.stat_set or "gwnsp" in cfg.stat_set:
        prof = shared_partner_profile(g)
        full[1] = gw_statistic(prof.connected, cfg.decay)
        full[2] = gw_statistic(prof.nonconnected, cfg.decay)
    return full[cfg.index]


def _common(adj: np.ndarray, u: int, v: int) -> int:
    return int(np.count_nonzero(adj[u] & adj[v]))


def change_stats(g: Graph, i: int, j: int, cfg: StatsConfig) -> np.ndarray:
    """h(g with (i, j) toggled) - h(g), visiting only pairs whose partner counts move.

    Toggling (i, j) leaves the partner count of (i, j) itself unchanged but
    moves it between the edgewise and non-edgewise sums. Pairs (i, k) with
    k ~ j and pairs (j, k) with k ~ i gain or lose the shared partner j
    (respectively i).
    """
    _check_pair(g.n, i, j)
    adj = g.adj
    w = gw_weights(g.n, cfg.decay)
    adding = not adj[i, j]
    sign = 1 if adding else -1
    d_esp = d_nsp = 0.0

    c_ij = _common(adj, i, j)
    d_esp += sign * w[c_ij]
    d_nsp -= sign * w[c_ij]

    for a, b in ((i, j), (j, i)):
        for k in np.flatnonzero(adj[b]):
            if k == a:
                continue
            old = _common(adj, a, k)
            delta = w[old + sign] - w[old]
            if adj[a, k]:
                d_esp += delta
            else:
                d_nsp += delta

    return np.array([float(sign), d_esp, d_nsp])[cfg.index]


# -- fixture text format ----------------------------------------------------


def format_graph(g: Graph) -> str:
    lines = [f"n {g.n}"]
    lines += [f"{i} {j}" for i, j in g.edges()]
    return "\n".join(lines) + "\n"


def parse_graph(text: str) -> Graph:
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows or rows[0][0] != "n" or len(rows[0]) != 2:
        raise ValueError("graph text must start with a line 'n <count>'")
    n = int(rows[0][1])
    edges = []
    for row in rows[1:]:
        if len(row) != 2:
            raise ValueError(f"malformed edge line: {' '.join(row)!r}")
        i, j = int(row[0]), int(row[1])
        if i >= j:
            raise ValueError(f"edge lines must satisfy i < j, got {i} {j}")
        edges.append((i, j))
    return Graph.from_edges(n, edges)


def read_graph(path) -> Graph:
    return parse_graph(Path(path).read_text())


def write_graph(g: Graph, path):
    Path(path).write_text(format_graph(g))
