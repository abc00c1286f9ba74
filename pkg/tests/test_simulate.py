import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import binom

from conftest import random_graph
from ergmsbi.graph import Graph, StatsConfig, shared_partner_profile, summary_stats
from ergmsbi.simulate import (
    SimConfig,
    TrainingSet,
    _Chain,
    enumerate_model,
    exact_normalizer,
    exact_stat_distribution,
    item_seed,
    log_normalizer,
    log_unnorm_density,
    mh_step,
    simulate_network,
    simulate_stats_batch,
    simulate_trace,
)

EDGES = StatsConfig(stat_set=("edges",))
FULL = StatsConfig()


def test_log_unnorm_density():
    assert log_unnorm_density([0, 0, 0], [5, 2, 1]) == 0.0
    assert log_unnorm_density([1, 0, 0], [3, 3, 0]) == 3.0
    assert log_unnorm_density([0.5, -1, 2], [2, 1, 1]) == 2.0
    with pytest.raises(ValueError):
        log_unnorm_density([1, 2], [1, 2, 3])


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(n=4, iterations=0)
    with pytest.raises(ValueError):
        SimConfig(n=4, init="half")
    with pytest.raises(ValueError):
        SimConfig(n=4, init=Graph.empty(5))


def test_mh_step_zero_change_always_accepts():
    # theta = 0 makes every log ratio 0, so every proposal is accepted
    g = Graph.empty(4)
    rng = np.random.default_rng(3)
    for _ in range(20):
        h = g.edge_count
        g = mh_step(g, np.zeros(3), rng)
        assert abs(g.edge_count - h) == 1


def test_strongly_negative_edges_keeps_graph_empty():
    g = Graph.empty(6)
    rng = np.random.default_rng(1)
    for _ in range(200):
        g = mh_step(g, np.array([-1e9, 0.0, 0.0]), rng, FULL)
    assert g.edge_count == 0
    cfg = SimConfig(n=6, iterations=1, seed=5)
    assert simulate_network([-1e9, 0, 0], cfg) == Graph.empty(6)
    assert simulate_network([-1e9, 0, 0], replace(cfg, iterations=5000)).edge_count == 0


def test_simulate_network_deterministic():
    cfg = SimConfig(n=12, iterations=3000, seed=77)
    theta = [-1.0, 0.3, -0.1]
    assert simulate_network(theta, cfg) == simulate_network(theta, cfg)
    assert simulate_network(theta, cfg) != simulate_network(theta, replace(cfg, seed=78))


def test_full_init_and_given_init():
    cfg = SimConfig(n=5, iterations=1, init="full", seed=0)
    g = simulate_network([1e9, 0, 0], cfg)
    assert g == Graph.complete(5)
    start = Graph.from_edges(5, [(0, 1), (2, 3)])
    assert simulate_network([1e9, 0, 0], replace(cfg, init=start)).edge_count >= 2


def test_kernel_profile_stays_consistent(rng):
    for seed in range(5):
        g0 = random_graph(14, 0.3, rng)
        chain = _Chain(g0, [-0.5, 0.4, -0.2], FULL)
        chain.run(2000, np.random.default_rng(seed))
        g = chain.graph()
        prof = shared_partner_profile(g)
        assert chain.profile[0, 1:].tolist() == prof.connected.tolist()
        assert chain.profile[1, 1:].tolist() == prof.nonconnected.tolist()


def test_trace_matches_recomputed_stats():
    theta = [-0.3, 0.2, -0.1]
    cfg = SimConfig(n=8, iterations=50, thin=7, seed=4)
    trace = simulate_trace(theta, cfg)
    assert trace.shape == (7, 3)
    # replay the same draws step by step and recompute from scratch
    chain = _Chain(Graph.empty(8), theta, FULL)
    rng = np.random.default_rng(4)
    picks = rng.integers(0, 28, size=50)
    logu = np.log(rng.random(50))
    from ergmsbi.simulate import _mh_kernel

    for row in range(7):
        sl = slice(row * 7, row * 7 + 7)
        _mh_kernel(chain.adj, chain.theta, chain.w, chain.pi, chain.pj, picks[sl], logu[sl], 1,
                   np.zeros((0, 3)), chain.profile)
        np.testing.assert_allclose(trace[row], summary_stats(chain.graph(), FULL), atol=1e-9)


def test_edges_only_binomial_stationary_law():
    cfg = SimConfig(n=4, iterations=1_000_000, seed=11, stats=EDGES)
    trace = simulate_trace([math.log(2)], cfg, burn_in=1000)
    freq = np.bincount(trace[:, 0].astype(int), minlength=7) / len(trace)
    exact = binom.pmf(np.arange(7), 6, 2 / 3)
    assert 0.5 * np.abs(freq - exact).sum() < 0.01


def test_uniform_over_labelled_graphs_at_zero():
    g = Graph.empty(4)
    rng = np.random.default_rng(2024)
    iu, ju = np.triu_indices(4, 1)
    counts = np.zeros(64)
    steps = 100_000
    for _ in range(steps):
        g = mh_step(g, np.zeros(3), rng)
        code = int(np.dot(g.adj[iu, ju], 1 << np.arange(6)))
        counts[code] += 1
    assert np.all(np.abs(counts / steps - 1 / 64) < 0.01)


def test_item_seed_rule():
    assert item_seed(0, 0) != item_seed(0, 1)
    assert item_seed(123, 5) == 123 ^ item_seed(0, 5)


def test_batch_matches_single_calls_and_workers():
    cfg = SimConfig(n=10, iterations=2000, seed=99)
    thetas = np.array([[-1.0, 0.1, 0.0], [-0.5, 0.0, -0.2], [0.0, 0.0, 0.0]])
    batch = simulate_stats_batch(thetas, cfg)
    for b, theta in enumerate(thetas):
        single = summary_stats(simulate_network(theta, replace(cfg, seed=item_seed(99, b))), FULL)
        np.testing.assert_array_equal(batch.xs[b], single)
    threaded = simulate_stats_batch(thetas, cfg, workers=3)
    np.testing.assert_array_equal(threaded.xs, batch.xs)
    np.testing.assert_array_equal(batch.rounds, 0)


def test_batch_empty_and_uniform_mean():
    cfg = SimConfig(n=4, iterations=200, seed=5)
    empty = simulate_stats_batch(np.zeros((0, 3)), cfg)
    assert len(empty) == 0
    B = 4000
    ts = simulate_stats_batch(np.zeros((B, 3)), cfg)
    edges = ts.xs[:, 0]
    # uniform labelled graph: Binomial(6, 1/2), mean 3, variance 1.5
    assert abs(edges.mean() - 3.0) < 3 * math.sqrt(1.5 / B)


def test_exact_normalizer_examples():
    m3 = enumerate_model(3, EDGES)
    assert m3.total == 8
    assert exact_normalizer([0.0], m3) == pytest.approx(8.0, rel=1e-12)
    assert exact_normalizer([math.log(2)], m3) == pytest.approx(27.0, rel=1e-12)
    m4 = enumerate_model(4, FULL)
    assert m4.total == 64
    assert exact_normalizer(np.zeros(3), m4) == pytest.approx(64.0, rel=1e-12)
    assert log_normalizer(np.zeros(3), m4) == pytest.approx(math.log(64), rel=1e-12)
    with pytest.raises(ValueError):
        exact_normalizer([0.0], m3, FULL)
    with pytest.raises(ValueError):
        enumerate_model(6, EDGES)


def test_exact_normalizer_binomial_identity():
    m5 = enumerate_model(5, EDGES)
    for theta in (-2.0, -0.3, 0.7, 3.1):
        assert log_normalizer([theta], m5) == pytest.approx(10 * math.log1p(math.exp(theta)), rel=1e-12)


def test_exact_stat_distribution_examples():
    m3 = enumerate_model(3, EDGES)
    stats, prob = exact_stat_distribution([0.0], m3)
    np.testing.assert_allclose(prob[np.argsort(stats[:, 0])], [1 / 8, 3 / 8, 3 / 8, 1 / 8], atol=1e-14)
    stats, prob = exact_stat_distribution([math.log(2)], m3)
    np.testing.assert_allclose(prob[np.argsort(stats[:, 0])], [1 / 27, 6 / 27, 12 / 27, 8 / 27], atol=1e-14)
    _, prob = exact_stat_distribution([0.3, -0.7, 1.2], enumerate_model(4, FULL))
    assert abs(prob.sum() - 1) < 1e-12


def test_training_set_csv_roundtrip(tmp_path):
    ts = TrainingSet(np.array([[0.1, -2.0 / 3]]), np.array([[3.0, 1.2345678901234567]]), [2])
    ts.to_csv(tmp_path / "t.csv")
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "theta_1,theta_2,x_1,x_2,round"
    back = TrainingSet.from_csv(tmp_path / "t.csv")
    np.testing.assert_array_equal(back.thetas, ts.thetas)
    np.testing.assert_array_equal(back.xs, ts.xs)
    assert back.rounds.tolist() == [2]
