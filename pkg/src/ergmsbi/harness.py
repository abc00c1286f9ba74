"""Evaluation protocols: stratified truths, bias metrics, data-space bias magnitude and
NPE-versus-exchange comparison."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp
from scipy.stats import ranksums

from .graph import STATISTICS, StatsConfig
from .simulate import (
    SimConfig,
    enumerate_model,
    item_seed,
    log_normalizer,
    simulate_network,
    simulate_stats_batch,
)

log = logging.getLogger(__name__)

# edge-count strata for a 90-vertex network
BASE_VERTICES = 90
BASE_STRATA = (0, 275, 550, 825, 1100)


class ExhaustionError(RuntimeError):
    """A stratum could not be filled within the attempt budget."""


@dataclass(frozen=True)
class EvalCase:
    theta_true: np.ndarray
    stratum: tuple[float, float]
    case_id: int


def edge_strata(n: int) -> list[tuple[float, float]]:
    """Four half-open edge-count intervals scaled by the pair count relative to 90 vertices."""
    scale = (n * (n - 1) / 2) / (BASE_VERTICES * (BASE_VERTICES - 1) / 2)
    bounds = [b * scale for b in BASE_STRATA]
    return list(zip(bounds[:-1], bounds[1:]))


def _seq(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def stratified_truths(target_counts, box, sim: SimConfig, seed: int = 0, pilot: int = 10,
                      min_fraction: float = 0.9, max_attempts: int = 2000) -> list[EvalCase]:
    """Rejection-sample parameters whose pilot edge counts fall in each stratum.

    ``box`` is ``(lo, hi)``, the search box theta is drawn uniformly from. A
    draw is kept for a stratum that still needs cases when its mean pilot
    edge count lies in the stratum and at least ``min_fraction`` of the pilot
    draws do too. Cases come back ordered by stratum, then discovery order.
    """
    target_counts = [int(c) for c in target_counts]
    strata = edge_strata(sim.n)
    if len(target_counts) != len(strata):
        raise ValueError(f"need {len(strata)} stratum counts, got {len(target_counts)}")
    if any(c < 0 for c in target_counts):
        raise ValueError("stratum counts must be nonnegative")
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    if lo.shape != (sim.stats.dim,) or hi.shape != lo.shape or np.any(hi < lo):
        raise ValueError("search box must be (lo, hi) vectors matching the statistic dimension")
    found: list[list[np.ndarray]] = [[] for _ in strata]
    rng = _seq(seed, 0)
    attempts = 0
    while any(len(f) < c for f, c in zip(found, target_counts)):
        if attempts >= max_attempts:
            short = [i for i, (f, c) in enumerate(zip(found, target_counts)) if len(f) < c]
            raise ExhaustionError(f"strata {short} unfilled after {max_attempts} attempts")
        theta = rng.uniform(lo, hi)
        edges = np.array([
            simulate_network(theta, replace(sim, seed=item_seed(seed, attempts * pilot + j))).edge_count
            for j in range(pilot)
        ])
        attempts += 1
        for s, (a, b) in enumerate(strata):
            inside = (edges >= a) & (edges < b)
            if len(found[s]) < target_counts[s] and a <= edges.mean() < b and inside.mean() >= min_fraction:
                found[s].append(theta)
                break
    cases = []
    for s, thetas in enumerate(found):
        for theta in thetas:
            cases.append(EvalCase(theta, strata[s], len(cases)))
    log.info("stratified truths: %d cases from %d attempts", len(cases), attempts)
    return cases


# -- metrics ---------------------------------------------------------------------


def point_estimate(posterior) -> np.ndarray:
    posterior = np.atleast_2d(np.asarray(posterior, dtype=float))
    if posterior.size == 0:
        raise ValueError("posterior sample is empty")
    return posterior.mean(axis=0)


@dataclass
class BiasReport:
    me: np.ndarray
    mae: np.ndarray
    rmse: np.ndarray
    truths: np.ndarray
    estimates: np.ndarray

    def check(self, tol: float = 1e-12) -> bool:
        """|ME| <= MAE <= RMSE per coordinate, up to rounding relative to the RMSE."""
        slack = tol * np.maximum(1.0, self.rmse)
        return bool(np.all(np.abs(self.me) <= self.mae + slack) and np.all(self.mae <= self.rmse + slack))

    def to_dict(self) -> dict:
        return {"me": self.me.tolist(), "mae": self.mae.tolist(), "rmse": self.rmse.tolist(),
                "truths": self.truths.tolist(), "estimates": self.estimates.tolist()}


def bias_metrics(truths, estimates) -> BiasReport:
    """ME, MAE and RMSE of ``truth - estimate`` per coordinate over K cases."""
    truths = np.asarray(truths, dtype=float)
    estimates = np.asarray(estimates, dtype=float)
    if truths.ndim == 1:
        truths, estimates = truths[:, None], estimates.reshape(len(estimates), -1)
    if truths.shape != estimates.shape:
        raise ValueError(f"truths {truths.shape} and estimates {estimates.shape} differ")
    if len(truths) == 0:
        raise ValueError("need at least one case")
    err = truths - estimates
    return BiasReport(err.mean(axis=0), np.abs(err).mean(axis=0), np.sqrt((err**2).mean(axis=0)),
                      truths, estimates)


@dataclass
class MagnitudeEntry:
    """Per statistic: small-bias flag, band, predictive mean and band coverage in percent."""

    small: np.ndarray
    q05: np.ndarray
    q95: np.ndarray
    pred_mean: np.ndarray
    coverage: np.ndarray

    def to_dict(self) -> dict:
        return {"small": self.small.tolist(), "q05": self.q05.tolist(), "q95": self.q95.tolist(),
                "pred_mean": self.pred_mean.tolist(), "coverage": self.coverage.tolist()}


def magnitude_classify(x_true_samples, x_pred_samples) -> MagnitudeEntry:
    """Small bias when the predictive mean lies in the closed 5-95% quantile band of the truth."""
    x_true = np.asarray(x_true_samples, dtype=float)
    x_pred = np.asarray(x_pred_samples, dtype=float)
    if x_true.size == 0 or x_pred.size == 0:
        raise ValueError("both sample sets must be nonempty")
    if x_true.ndim == 1:
        x_true, x_pred = x_true[:, None], x_pred.reshape(len(x_pred), -1)
    q05, q95 = np.quantile(x_true, [0.05, 0.95], axis=0, method="linear")
    mean = x_pred.mean(axis=0)
    small = (mean >= q05) & (mean <= q95)
    coverage = 100.0 * ((x_pred >= q05) & (x_pred <= q95)).mean(axis=0)
    return MagnitudeEntry(small, q05, q95, mean, coverage)


@dataclass
class MagnitudeReport:
    case_ids: list[int]
    entries: list[MagnitudeEntry]

    def to_dict(self) -> dict:
        return {"cases": [{"case_id": k, **e.to_dict()} for k, e in zip(self.case_ids, self.entries)]}


# -- samplers -----------------------------------------------------------------------


class GridPosterior:
    """Exact posterior for a one-parameter model on a theta grid, behind ``sample(x, count, rng)``.

    The normaliser comes from exhaustive enumeration, so ``n`` is limited to
    enumerable sizes. Draws pick a grid cell by posterior mass and jitter
    uniformly within it.
    """

    def __init__(self, n: int, stats: StatsConfig, prior_mean: float = 0.0, prior_var: float = 10.0,
                 lo: float = -15.0, hi: float = 15.0, step: float = 0.01):
        if stats.dim != 1:
            raise ValueError("grid posterior supports a single statistic")
        self.grid = np.arange(lo, hi + step / 2, step)
        self.step = step
        model = enumerate_model(n, stats)
        self.log_z = np.array([log_normalizer([t], model) for t in self.grid])
        self.log_prior = -0.5 * (self.grid - prior_mean) ** 2 / prior_var
        # trapezoid rule: end points carry half weight
        self.log_prior[[0, -1]] += np.log(0.5)

    def log_weights(self, x) -> np.ndarray:
        logw = self.grid * float(np.ravel(x)[0]) - self.log_z + self.log_prior
        return logw - logsumexp(logw)

    def mean(self, x) -> float:
        return float(np.exp(self.log_weights(x)) @ self.grid)

    def sample(self, x, count: int, rng: np.random.Generator) -> np.ndarray:
        cells = rng.choice(len(self.grid), size=count, p=np.exp(self.log_weights(x)))
        return (self.grid[cells] + rng.uniform(-0.5, 0.5, count) * self.step)[:, None]


def wilcoxon_rank_sum(a, b) -> float:
    """Two-sided normal-approximation p-value of the rank-sum test."""
    return float(ranksums(np.asarray(a, float), np.asarray(b, float)).pvalue)


# -- bias evaluation ------------------------------------------------------------------


def _replicate_means(sampler, xs, draws: int, seed: int, case_id: int) -> np.ndarray:
    return np.array([point_estimate(sampler.sample(x, draws, _seq(seed, case_id, m))) for m, x in enumerate(xs)])


@dataclass
class CaseResult:
    case: EvalCase
    observations: np.ndarray
    replicate_means: np.ndarray
    estimate: np.ndarray
    magnitude: MagnitudeEntry


@dataclass
class BiasEvaluation:
    bias: BiasReport
    magnitude: MagnitudeReport
    cases: list[CaseResult] = field(repr=False)

    def write(self, out_dir, stat_names=STATISTICS):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        p = self.bias.truths.shape[1]
        with open(out / "bias_cases.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id", "stratum_lo", "stratum_hi"] + [f"true_{k}" for k in range(1, p + 1)]
                       + [f"est_{k}" for k in range(1, p + 1)])
            for r in self.cases:
                w.writerow([r.case.case_id, repr(float(r.case.stratum[0])), repr(float(r.case.stratum[1]))]
                           + [repr(float(v)) for v in r.case.theta_true] + [repr(float(v)) for v in r.estimate])
        with open(out / "magnitude.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id", "statistic", "small", "q05", "q95", "pred_mean", "coverage"])
            for k, e in zip(self.magnitude.case_ids, self.magnitude.entries):
                for s, name in enumerate(stat_names):
                    w.writerow([k, name, int(e.small[s]), repr(float(e.q05[s])), repr(float(e.q95[s])),
                                repr(float(e.pred_mean[s])), repr(float(e.coverage[s]))])
        summary = {"bias": self.bias.to_dict(), "magnitude": self.magnitude.to_dict(),
                   "metric_inequalities_hold": self.bias.check()}
        (out / "bias_summary.json").write_text(json.dumps(summary, indent=2))


def run_bias_eval(cases, M: int, model, sim: SimConfig, posterior_draws: int = 1000,
                  predictive_draws: int = 100, true_draws: int | None = None, seed: int = 0,
                  workers: int = 1) -> BiasEvaluation:
    """K x M bias evaluation of an amortised posterior sampler.

    For each case: simulate ``M`` observations at the true parameter, take the
    posterior mean for each, average them into the case estimate, then
    compare ``predictive_draws`` realisations per replicate mean with
    ``true_draws`` realisations at the truth (default ``M * predictive_draws``).
    """
    cases = sorted(cases, key=lambda c: c.case_id)
    if not cases:
        raise ValueError("no evaluation cases")
    if M < 1 or posterior_draws < 1 or predictive_draws < 1:
        raise ValueError("M, posterior_draws and predictive_draws must be positive")
    true_draws = true_draws or M * predictive_draws
    results = []
    for case in cases:
        k = case.case_id
        theta = np.asarray(case.theta_true, dtype=float)
        obs = simulate_stats_batch(np.tile(theta, (M, 1)), replace(sim, seed=item_seed(seed, 3 * k)),
                                   workers=workers).xs
        means = _replicate_means(model, obs, posterior_draws, seed, k)
        x_true = simulate_stats_batch(np.tile(theta, (true_draws, 1)), replace(sim, seed=item_seed(seed, 3 * k + 1)),
                                      workers=workers).xs
        x_pred = simulate_stats_batch(np.repeat(means, predictive_draws, axis=0),
                                      replace(sim, seed=item_seed(seed, 3 * k + 2)), workers=workers).xs
        entry = magnitude_classify(x_true, x_pred)
        results.append(CaseResult(case, obs, means, means.mean(axis=0), entry))
        log.info("case %d: estimate %s, small bias %s", k, results[-1].estimate, entry.small)
    bias = bias_metrics([r.case.theta_true for r in results], [r.estimate for r in results])
    magnitude = MagnitudeReport([r.case.case_id for r in results], [r.magnitude for r in results])
    return BiasEvaluation(bias, magnitude, results)


# -- method comparison --------------------------------------------------------------------


@dataclass
class PairedComparison:
    case_id: int
    observations: np.ndarray
    npe_means: np.ndarray
    exchange_means: np.ndarray

    def mean_abs_difference(self) -> np.ndarray:
        return np.abs(self.npe_means - self.exchange_means).mean(axis=0)

    def write_paired_csv(self, path):
        p = self.npe_means.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id", "method", "replicate"] + [f"theta_{k}" for k in range(1, p + 1)])
            for method, means in (("npe", self.npe_means), ("exchange", self.exchange_means)):
                for m, row in enumerate(means):
                    w.writerow([self.case_id, method, m] + [repr(float(v)) for v in row])

    def write_plot_csv(self, path, names=None):
        p = self.npe_means.shape[1]
        names = names or [f"theta_{k}" for k in range(1, p + 1)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "coordinate", "value"])
            for method, means in (("npe", self.npe_means), ("exchange", self.exchange_means)):
                for row in means:
                    for name, v in zip(names, row):
                        w.writerow([method, name, repr(float(v))])


def compare_methods(case: EvalCase, M: int, model, exchange, sim: SimConfig, posterior_draws: int = 1000,
                    exchange_draws: int | None = None, seed: int = 0, workers: int = 1) -> PairedComparison:
    """Posterior means from the amortised model and the exchange sampler on the same observations.

    ``exchange`` is any object with ``sample(x, count, rng)``, typically an
    ``ExchangePosterior`` sharing the model's prior.
    """
    if M < 1:
        raise ValueError("M must be positive")
    theta = np.asarray(case.theta_true, dtype=float)
    obs = simulate_stats_batch(np.tile(theta, (M, 1)), replace(sim, seed=item_seed(seed, 3 * case.case_id)),
                               workers=workers).xs
    npe = _replicate_means(model, obs, posterior_draws, seed, case.case_id)
    exch = _replicate_means(exchange, obs, exchange_draws or posterior_draws, seed + 1, case.case_id)
    return PairedComparison(case.case_id, obs, npe, exch)
