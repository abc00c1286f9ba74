"""Exhaustive-enumeration oracle checks on graphs with at most five vertices."""

from __future__ import annotations

import itertools
import math

import numpy as np

from .graph import Graph, StatsConfig, change_stats, summary_stats, toggle_edge
from .simulate import (
    SimConfig,
    enumerate_model,
    exact_normalizer,
    exact_stat_distribution,
    simulate_trace,
)


def _all_graphs(n):
    pairs = list(itertools.combinations(range(n), 2))
    for bits in itertools.product((False, True), repeat=len(pairs)):
        yield Graph.from_edges(n, [pr for pr, b in zip(pairs, bits) if b])


def _loop_stats(g: Graph, decay: float) -> np.ndarray:
    """Statistics by explicit loops over vertex triples."""
    n = g.n
    r = 1.0 - math.exp(-decay)
    esp = nsp = 0.0
    for u, v in itertools.combinations(range(n), 2):
        c = sum(1 for k in range(n) if k not in (u, v) and g.adj[u, k] and g.adj[v, k])
        w = math.exp(decay) * (1.0 - r**c)
        if g.adj[u, v]:
            esp += w
        else:
            nsp += w
    return np.array([g.edge_count, esp, nsp], dtype=float)


def check_statistics(n=5, decay=0.75):
    cfg = StatsConfig(decay=decay)
    worst = 0.0
    for g in _all_graphs(n):
        worst = max(worst, float(np.max(np.abs(summary_stats(g, cfg) - _loop_stats(g, decay)))))
    return worst < 1e-9, f"max |stats - loop oracle| = {worst:.2e} over all graphs on {n} vertices"


def check_change_stats(n=4):
    cfg = StatsConfig()
    worst = 0.0
    for g in _all_graphs(n):
        base = summary_stats(g, cfg)
        for i, j in itertools.combinations(range(n), 2):
            full = summary_stats(toggle_edge(g, i, j), cfg) - base
            worst = max(worst, float(np.max(np.abs(change_stats(g, i, j, cfg) - full))))
    return worst < 1e-9, f"max |change - recompute| = {worst:.2e}"


def check_normalizer():
    worst = 0.0
    for n in (2, 3, 4, 5):
        model = enumerate_model(n, StatsConfig(stat_set=("edges",)))
        pairs = n * (n - 1) // 2
        for theta in (-1.0, 0.0, 0.7):
            exact = exact_normalizer([theta], model)
            worst = max(worst, abs(exact / (1 + math.exp(theta)) ** pairs - 1))
        if model.total != 2**pairs:
            return False, f"n={n}: enumerated {model.total} graphs"
    return worst < 1e-12, f"max relative error vs (1+e^theta)^N = {worst:.2e}"


def check_sampler(steps=200_000, seed=0):
    cfg = StatsConfig()
    model = enumerate_model(4, cfg)
    theta = np.array([-0.4, 0.3, -0.2])
    stats, prob = exact_stat_distribution(theta, model)
    trace = simulate_trace(theta, SimConfig(n=4, iterations=steps, seed=seed), burn_in=1000)
    keys = {tuple(np.round(s, 9)): k for k, s in enumerate(stats)}
    counts = np.zeros(len(stats))
    for row in np.round(trace, 9):
        counts[keys[tuple(row)]] += 1
    tv = 0.5 * np.abs(counts / counts.sum() - prob).sum()
    return tv < 0.02, f"total variation {tv:.4f} over {steps} steps"


CHECKS = {
    "statistics": check_statistics,
    "change_stats": check_change_stats,
    "normalizer": check_normalizer,
    "sampler": check_sampler,
}


def run_selftest():
    """List of ``(name, passed, detail)`` for every oracle check."""
    results = []
    for name, check in CHECKS.items():
        ok, detail = check()
        results.append((name, bool(ok), detail))
    return results
