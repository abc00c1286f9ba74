"""ERGM network simulation by Metropolis-Hastings edge toggling, plus exact
enumeration of tiny graph spaces for oracle checks."""

from __future__ import annotations

import csv
import functools
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy.special import logsumexp

from .graph import STATISTICS, Graph, StatsConfig, change_stats, gw_weights, summary_stats, toggle_edge

MAX_EXACT_N = 5
_MASK64 = (1 << 64) - 1


class SimulationCounter:
    """Counts calls into the network simulator (used to verify amortisation)."""

    def __init__(self):
        self.networks = 0

    def reset(self):
        self.networks = 0


sim_counter = SimulationCounter()


@dataclass(frozen=True)
class SimConfig:
    n: int
    iterations: int = 50_000
    init: str | Graph = "empty"
    seed: int = 0
    thin: int = 1
    stats: StatsConfig = field(default_factory=StatsConfig)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.thin < 1:
            raise ValueError(f"thin must be >= 1, got {self.thin}")
        if self.n < 2:
            raise ValueError(f"need at least 2 vertices, got {self.n}")
        if isinstance(self.init, Graph):
            if self.init.n != self.n:
                raise ValueError("initial graph size does not match n")
        elif self.init not in ("empty", "full"):
            raise ValueError(f"init must be 'empty', 'full' or a Graph, got {self.init!r}")
        if not 0 <= self.seed <= _MASK64:
            raise ValueError("seed must be an unsigned 64-bit integer")


def initial_graph(cfg: SimConfig) -> Graph:
    if isinstance(cfg.init, Graph):
        return cfg.init
    return Graph.empty(cfg.n) if cfg.init == "empty" else Graph.complete(cfg.n)


def log_unnorm_density(theta, h) -> float:
    theta = np.asarray(theta, dtype=float)
    h = np.asarray(h, dtype=float)
    if theta.shape != h.shape or theta.ndim != 1:
        raise ValueError(f"dimension mismatch: theta {theta.shape} vs stats {h.shape}")
    return float(theta @ h)


def _full_theta(theta, stats: StatsConfig) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (stats.dim,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({stats.dim},)")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    full = np.zeros(3)
    full[stats.index] = theta
    return full


# -- rng helpers -------------------------------------------------------------


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def item_seed(base_seed: int, index: int) -> int:
    """Seed of the ``index``-th task: base seed XOR splitmix64(index)."""
    return (base_seed ^ _splitmix64(index)) & _MASK64


@functools.lru_cache(maxsize=64)
def _pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    iu, ju = np.triu_indices(n, 1)
    iu, ju = iu.astype(np.int64), ju.astype(np.int64)
    iu.setflags(write=False)
    ju.setflags(write=False)
    return iu, ju


# -- MH kernel ---------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _common(adj, u, v):
    n = adj.shape[0]
    c = 0
    for k in range(n):
        c += adj[u, k] & adj[v, k]
    return c


@numba.njit(cache=True, nogil=True)
def _mh_kernel(adj, theta, w, pi, pj, picks, logu, thin, trace, profile):
    """Run ``len(picks)`` toggle proposals in place on ``adj``.

    ``profile`` is (2, n-1) integer counts of connected / non-connected pairs
    by shared-partner count and is kept in sync with ``adj``. Every ``thin``
    steps the full statistic vector is written into ``trace`` (if it has
    rows). Returns the number of accepted toggles.
    """
    n = adj.shape[0]
    accepted = 0
    row = 0
    d_old = np.empty(2 * n, dtype=np.int64)
    d_kind = np.empty(2 * n, dtype=np.int64)
    for step in range(picks.shape[0]):
        i = pi[picks[step]]
        j = pj[picks[step]]
        adding = adj[i, j] == 0
        sign = 1 if adding else -1
        c_ij = _common(adj, i, j)
        d_esp = sign * w[c_ij]
        d_nsp = -sign * w[c_ij]
        m = 0
        for side in range(2):
            a = i if side == 0 else j
            b = j if side == 0 else i
            for k in range(n):
                if k == a or k == b or adj[b, k] == 0:
                    continue
                old = _common(adj, a, k)
                delta = w[old + sign] - w[old]
                if adj[a, k]:
                    d_esp += delta
                    d_kind[m] = 0
                else:
                    d_nsp += delta
                    d_kind[m] = 1
                d_old[m] = old
                m += 1
        log_ratio = theta[0] * sign + theta[1] * d_esp + theta[2] * d_nsp
        if logu[step] < log_ratio:
            accepted += 1
            adj[i, j] = 1 - adj[i, j]
            adj[j, i] = adj[i, j]
            if adding:
                profile[1, c_ij] -= 1
                profile[0, c_ij] += 1
            else:
                profile[0, c_ij] -= 1
                profile[1, c_ij] += 1
            for q in range(m):
                profile[d_kind[q], d_old[q]] -= 1
                profile[d_kind[q], d_old[q] + sign] += 1
        if trace.shape[0] > 0 and (step + 1) % thin == 0:
            edges = 0
            esp = 0.0
            nsp = 0.0
            for c in range(profile.shape[1]):
                edges += profile[0, c]
                esp += w[c] * profile[0, c]
                nsp += w[c] * profile[1, c]
            trace[row, 0] = edges
            trace[row, 1] = esp
            trace[row, 2] = nsp
            row += 1
    return accepted


def _profile_counts(adj: np.ndarray) -> np.ndarray:
    n = adj.shape[0]
    a = adj.astype(np.int64)
    common = a @ a
    iu, ju = _pairs(n)
    c = common[iu, ju]
    linked = adj[iu, ju].astype(bool)
    prof = np.zeros((2, max(n - 1, 1)), dtype=np.int64)
    prof[0] = np.bincount(c[linked], minlength=prof.shape[1])[: prof.shape[1]]
    prof[1] = np.bincount(c[~linked], minlength=prof.shape[1])[: prof.shape[1]]
    return prof


class _Chain:
    """Mutable MH state reused across calls; consumes draws from ``rng``."""

    CHUNK = 1 << 20

    def __init__(self, g: Graph, theta, stats: StatsConfig):
        self.stats = stats
        self.n = g.n
        self.adj = g.adj.astype(np.uint8)
        self.theta = _full_theta(theta, stats)
        self.w = gw_weights(g.n, stats.decay)
        self.pi, self.pj = _pairs(g.n)
        self.profile = _profile_counts(self.adj)
        self.accepted = 0

    def run(self, steps: int, rng: np.random.Generator, thin: int = 1, record: bool = False):
        npairs = len(self.pi)
        traces = []
        done = 0
        while done < steps:
            size = min(self.CHUNK - self.CHUNK % thin, steps - done)
            picks = rng.integers(0, npairs, size=size)
            logu = np.log(rng.random(size))
            rows = size // thin if record else 0
            trace = np.zeros((rows, 3))
            self.accepted += _mh_kernel(
                self.adj, self.theta, self.w, self.pi, self.pj, picks, logu, thin, trace, self.profile
            )
            traces.append(trace)
            done += size
        if record:
            return np.concatenate(traces)[:, self.stats.index]
        return None

    def graph(self) -> Graph:
        return Graph._trusted(self.n, self.adj.astype(bool))


def mh_step(g: Graph, theta, rng: np.random.Generator, stats: StatsConfig | None = None) -> Graph:
    """One uniform-pair toggle proposal accepted with probability min(1, exp(theta . dh))."""
    stats = stats or StatsConfig()
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (stats.dim,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({stats.dim},)")
    pi, pj = _pairs(g.n)
    k = rng.integers(0, len(pi))
    i, j = int(pi[k]), int(pj[k])
    logu = math.log(rng.random())
    if logu < float(theta @ change_stats(g, i, j, stats)):
        return toggle_edge(g, i, j)
    return g


def simulate_network(theta, cfg: SimConfig) -> Graph:
    """Final state after ``cfg.iterations`` MH steps; deterministic given ``cfg.seed``."""
    sim_counter.networks += 1
    chain = _Chain(initial_graph(cfg), theta, cfg.stats)
    chain.run(cfg.iterations, np.random.default_rng(cfg.seed))
    return chain.graph()


def simulate_stats(theta, cfg: SimConfig) -> np.ndarray:
    return summary_stats(simulate_network(theta, cfg), cfg.stats)


def simulate_trace(theta, cfg: SimConfig, burn_in: int = 0) -> np.ndarray:
    """Statistics recorded every ``cfg.thin`` steps of one long chain.

    ``cfg.iterations`` counts recorded steps after ``burn_in``.
    """
    sim_counter.networks += 1
    rng = np.random.default_rng(cfg.seed)
    chain = _Chain(initial_graph(cfg), theta, cfg.stats)
    if burn_in:
        chain.run(burn_in, rng)
    return chain.run(cfg.iterations, rng, thin=cfg.thin, record=True)


@dataclass
class TrainingSet:
    """Paired parameter / statistic draws; ``rounds[b]`` is the SNPE round (0 = prior)."""

    thetas: np.ndarray
    xs: np.ndarray
    rounds: np.ndarray

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=float)
        self.xs = np.asarray(self.xs, dtype=float)
        self.rounds = np.asarray(self.rounds, dtype=np.int64).reshape(-1)
        if self.thetas.ndim != 2 or self.xs.ndim != 2 or len(self.thetas) != len(self.xs):
            raise ValueError(f"theta/x row counts differ: {self.thetas.shape} vs {self.xs.shape}")
        if len(self.rounds) != len(self.thetas):
            raise ValueError("one round label per pair is required")
        if np.any(self.rounds < 0):
            raise ValueError("rounds must be nonnegative")

    def __len__(self):
        return len(self.thetas)

    @property
    def dim(self) -> int:
        return self.thetas.shape[1]

    @classmethod
    def empty(cls, p: int) -> TrainingSet:
        return cls(np.zeros((0, p)), np.zeros((0, p)), np.zeros(0, dtype=np.int64))

    def extend(self, other: TrainingSet) -> TrainingSet:
        return TrainingSet(np.vstack([self.thetas, other.thetas]), np.vstack([self.xs, other.xs]),
                           np.concatenate([self.rounds, other.rounds]))

    def to_csv(self, path):
        write_pairs_csv(path, self.thetas, self.xs, self.rounds)

    @classmethod
    def from_csv(cls, path) -> TrainingSet:
        return cls(*read_pairs_csv(path))


def _stats_worker(args):
    theta, cfg = args
    return simulate_stats(theta, cfg)


def simulate_stats_batch(thetas, cfg: SimConfig, workers: int = 1, round: int = 0) -> TrainingSet:
    """One independent realisation per theta; item ``b`` uses ``item_seed(cfg.seed, b)``.

    Pairs come back in input order whatever the worker count.
    """
    thetas = np.asarray(thetas, dtype=float).reshape(-1, cfg.stats.dim)
    tasks = [(t, replace(cfg, seed=item_seed(cfg.seed, b))) for b, t in enumerate(thetas)]
    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(_stats_worker, tasks))
    else:
        rows = [_stats_worker(t) for t in tasks]
    xs = np.vstack(rows) if rows else np.zeros((0, cfg.stats.dim))
    return TrainingSet(thetas, xs, np.full(len(thetas), round, dtype=np.int64))


# -- exact enumeration -------------------------------------------------------


@dataclass(frozen=True)
class ExactModel:
    n: int
    cfg: StatsConfig
    stats: np.ndarray
    multiplicity: np.ndarray

    @property
    def total(self) -> int:
        return int(self.multiplicity.sum())


def enumerate_model(n: int, cfg: StatsConfig) -> ExactModel:
    """Deduplicated statistic vectors over all 2^(n(n-1)/2) labelled graphs."""
    if not 1 <= n <= MAX_EXACT_N:
        raise ValueError(f"exact enumeration supports 1 <= n <= {MAX_EXACT_N}, got {n}")
    pairs = list(itertools.combinations(range(n), 2))
    table: dict[tuple, int] = {}
    for mask in range(1 << len(pairs)):
        g = Graph.from_edges(n, [p for b, p in enumerate(pairs) if mask >> b & 1])
        key = tuple(np.round(summary_stats(g, cfg), 12))
        table[key] = table.get(key, 0) + 1
    keys = sorted(table)
    return ExactModel(n, cfg, np.array(keys, dtype=float).reshape(len(keys), cfg.dim),
                      np.array([table[k] for k in keys], dtype=np.int64))


def _check_model(theta, model: ExactModel, cfg: StatsConfig | None):
    if cfg is not None and cfg != model.cfg:
        raise ValueError("statistics config does not match the enumerated model")
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.cfg.dim,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({model.cfg.dim},)")
    return theta


def log_normalizer(theta, model: ExactModel, cfg: StatsConfig | None = None) -> float:
    theta = _check_model(theta, model, cfg)
    return float(logsumexp(model.stats @ theta, b=model.multiplicity))


def exact_normalizer(theta, model: ExactModel, cfg: StatsConfig | None = None) -> float:
    return math.exp(log_normalizer(theta, model, cfg))


def exact_stat_distribution(theta, model: ExactModel, cfg: StatsConfig | None = None):
    """(stats, probability) arrays over the distinct statistic vectors."""
    theta = _check_model(theta, model, cfg)
    logw = model.stats @ theta + np.log(model.multiplicity)
    prob = np.exp(logw - logsumexp(logw))
    return model.stats.copy(), prob


# -- TrainingSet CSV ---------------------------------------------------------


def training_header(p: int) -> list[str]:
    return [f"theta_{k}" for k in range(1, p + 1)] + [f"x_{k}" for k in range(1, p + 1)] + ["round"]


def write_pairs_csv(path, thetas, xs, rounds):
    thetas = np.asarray(thetas, dtype=float)
    xs = np.asarray(xs, dtype=float)
    p = xs.shape[1]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(training_header(p))
        for t, x, r in zip(thetas, xs, rounds):
            out.writerow([repr(float(v)) for v in t] + [repr(float(v)) for v in x] + [int(r)])


def read_pairs_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    p = (len(header) - 1) // 2
    if header != training_header(p):
        raise ValueError(f"unexpected training-set header {header}")
    data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, 2 * p + 1)
    return data[:, :p], data[:, p : 2 * p], data[:, 2 * p].astype(np.int64)


__all__ = [
    "STATISTICS", "SimConfig", "TrainingSet", "ExactModel", "log_unnorm_density", "mh_step", "simulate_network",
    "simulate_stats", "simulate_trace", "simulate_stats_batch", "enumerate_model", "exact_normalizer",
    "log_normalizer", "exact_stat_distribution", "item_seed", "sim_counter",
]
