"""Bayesian ERGM posterior sampling with the exchange algorithm.

The auxiliary network drawn at the proposed parameter makes the two
intractable normalising constants cancel in the acceptance ratio, which
reduces to

    (theta' - theta) . (x_obs - x') + log prior(theta') - log prior(theta).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .graph import Graph, summary_stats
from .simulate import SimConfig, simulate_network

_LOG_2PI = math.log(2 * math.pi)


def _spd(cov, p=None) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1] or (p is not None and cov.shape[0] != p):
        raise ValueError(f"covariance has shape {cov.shape}")
    if not np.allclose(cov, cov.T):
        raise ValueError("covariance must be symmetric")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("covariance must be positive definite") from None
    return cov


@dataclass(frozen=True, eq=False)
class PriorSpec:
    """Multivariate normal prior."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", _spd(self.cov, len(mean)))
        chol = np.linalg.cholesky(self.cov)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_chol_inv", np.linalg.inv(chol))
        object.__setattr__(self, "_logdet", 2 * float(np.log(np.diag(chol)).sum()))

    @classmethod
    def isotropic(cls, p: int, variance: float = 10.0) -> PriorSpec:
        return cls(np.zeros(p), variance * np.eye(p))

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def log_prob(self, theta) -> np.ndarray:
        """Log density at one point (scalar) or at each row of an (N, p) array."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1:] != (self.dim,):
            raise ValueError(f"theta has shape {theta.shape}, prior dimension is {self.dim}")
        diff = (theta - self.mean).reshape(-1, self.dim)
        white = diff @ self._chol_inv.T
        out = -0.5 * (np.einsum("ij,ij->i", white, white) + self.dim * _LOG_2PI + self._logdet)
        return float(out[0]) if theta.ndim == 1 else out

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + rng.standard_normal((count, self.dim)) @ self._chol.T


def log_prior(theta, prior: PriorSpec) -> float:
    return prior.log_prob(theta)


@dataclass(frozen=True, eq=False)
class ProposalSpec:
    """Symmetric normal random walk N(theta, cov)."""

    cov: np.ndarray
    adapt: bool = False

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        chol = np.zeros_like(cov)
        if np.any(cov):
            cov = _spd(cov)
            chol = np.linalg.cholesky(cov)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def isotropic(cls, p: int, sd: float = 0.1, adapt: bool = False) -> ProposalSpec:
        return cls(sd**2 * np.eye(p), adapt)

    def draw(self, theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return theta + self._chol @ rng.standard_normal(len(theta))


@dataclass
class PosteriorChain:
    samples: np.ndarray
    accepted: np.ndarray
    burn_in: int

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if len(self.accepted) else 0.0

    @property
    def posterior(self) -> np.ndarray:
        """Samples after burn-in (the initial draw counts as step 0)."""
        return self.samples[self.burn_in + 1 :]

    def summary(self) -> dict:
        post = self.posterior
        return {
            "acceptance_rate": self.acceptance_rate,
            "mean": post.mean(axis=0).tolist(),
            "sd": post.std(axis=0, ddof=1).tolist() if len(post) > 1 else [0.0] * post.shape[1],
        }

    def to_csv(self, path):
        p = self.samples.shape[1]
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["step"] + [f"theta_{k}" for k in range(1, p + 1)] + ["accepted"])
            flags = np.concatenate([[0], self.accepted.astype(int)])
            for step, (row, acc) in enumerate(zip(self.samples, flags)):
                out.writerow([step] + [repr(float(v)) for v in row] + [int(acc)])


def exchange_log_ratio(theta, theta_new, x_obs, x_aux, prior: PriorSpec) -> float:
    theta = np.asarray(theta, dtype=float)
    theta_new = np.asarray(theta_new, dtype=float)
    data = float((theta_new - theta) @ (np.asarray(x_obs, float) - np.asarray(x_aux, float)))
    return data + prior.log_prob(theta_new) - prior.log_prob(theta)


def exchange_step(theta, x_obs, prior: PriorSpec, prop: ProposalSpec, sim: SimConfig,
                  rng: np.random.Generator, aux_init: Graph | None = None):
    """One exchange update. Returns ``(theta_next, accepted, aux_graph)``.

    ``aux_init`` seeds the auxiliary chain; ``None`` uses ``sim.init``.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (prior.dim,) or np.shape(x_obs) != (prior.dim,):
        raise ValueError("theta, x_obs and prior dimensions disagree")
    theta_new = prop.draw(theta, rng)
    aux_cfg = replace(sim, seed=int(rng.integers(0, 2**63)),
                      init=aux_init if aux_init is not None else sim.init)
    aux = simulate_network(theta_new, aux_cfg)
    x_aux = summary_stats(aux, sim.stats)
    log_ratio = exchange_log_ratio(theta, theta_new, x_obs, x_aux, prior)
    accepted = math.log(rng.random()) < log_ratio
    return (theta_new if accepted else theta), bool(accepted), aux


def run_exchange(x_obs, T: int, burn_in: int, prior: PriorSpec, prop: ProposalSpec, sim: SimConfig,
                 seed: int = 0, reuse_aux: bool = False, theta0=None) -> PosteriorChain:
    """Chain of ``T`` exchange steps after an initial draw from the prior.

    With ``reuse_aux`` the auxiliary simulation starts from the previous
    auxiliary graph instead of ``sim.init``. With ``prop.adapt`` the proposal
    covariance is re-estimated once from the burn-in samples.
    """
    if not T > burn_in >= 0:
        raise ValueError(f"need T > burn_in >= 0, got T={T}, burn_in={burn_in}")
    x_obs = np.asarray(x_obs, dtype=float)
    rng = np.random.default_rng(seed)
    theta = prior.sample(1, rng)[0] if theta0 is None else np.asarray(theta0, dtype=float)
    samples = np.empty((T + 1, prior.dim))
    accepted = np.zeros(T, dtype=bool)
    samples[0] = theta
    aux = None
    for t in range(T):
        if prop.adapt and t == burn_in and burn_in > 1:
            emp = np.atleast_2d(np.cov(samples[1 : burn_in + 1].T))
            prop = ProposalSpec(2.38**2 / prior.dim * emp + 1e-6 * np.eye(prior.dim))
        theta, accepted[t], new_aux = exchange_step(
            theta, x_obs, prior, prop, sim, rng, aux if reuse_aux else None
        )
        aux = new_aux
        samples[t + 1] = theta
    return PosteriorChain(samples, accepted, burn_in)


class ExchangePosterior:
    """Exchange sampler behind the ``sample(x, count, rng)`` interface of a flow."""

    def __init__(self, prior: PriorSpec, prop: ProposalSpec, sim: SimConfig, burn_in: int = 1000,
                 reuse_aux: bool = False):
        self.prior = prior
        self.prop = prop
        self.sim = sim
        self.burn_in = burn_in
        self.reuse_aux = reuse_aux

    def sample(self, x, count: int, rng: np.random.Generator) -> np.ndarray:
        chain = run_exchange(x, self.burn_in + count, self.burn_in, self.prior, self.prop, self.sim,
                             seed=int(rng.integers(0, 2**63)), reuse_aux=self.reuse_aux)
        return chain.posterior[-count:]
