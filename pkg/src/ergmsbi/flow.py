"""Conditional masked autoregressive flow q(theta | x) in plain numpy.

Each transform is a MADE network that reads the (standardised) parameter
vector through autoregressive masks and the conditioning statistics through
unmasked connections, and outputs a shift ``mu`` and log-scale ``alpha`` per
coordinate. The density direction maps parameters to base noise:

    z_i = (u_i - mu_i(u_<i, x)) * exp(-alpha_i(u_<i, x))

Coordinates are reversed between consecutive transforms. Gradients of the
log density with respect to every weight are computed by hand-written
reverse-mode differentiation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
ALPHA_BOUND = 7.0
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def made_masks(p: int, hidden_units: int, hidden_layers: int, rng: np.random.Generator | None = None):
    """Degree-based MADE masks ``[input, hidden..., output]``.

    Parameter input ``d`` (1-based) has degree ``d``; hidden units take
    degrees in ``0..p-1``; output ``i`` sees hidden units of degree below
    ``i``. Context inputs are not masked, so a degree-0 hidden unit sees the
    context only. Returns boolean matrices shaped (out_features, in_features).
    """
    if p < 1 or hidden_units < 1 or hidden_layers < 1:
        raise ValueError("p, hidden_units and hidden_layers must be positive")
    degrees = []
    for _ in range(hidden_layers):
        d = np.arange(hidden_units) % p
        if rng is not None:
            d = rng.permutation(d)
        degrees.append(d)
    in_deg = np.arange(1, p + 1)
    masks = [degrees[0][:, None] >= in_deg[None, :]]
    for prev, cur in zip(degrees, degrees[1:]):
        masks.append(cur[:, None] >= prev[None, :])
    masks.append(degrees[-1][None, :] < in_deg[:, None])
    return masks


@dataclass
class Standardizer:
    theta_mean: np.ndarray
    theta_sd: np.ndarray
    x_mean: np.ndarray
    x_sd: np.ndarray

    @classmethod
    def identity(cls, p: int, c: int) -> Standardizer:
        return cls(np.zeros(p), np.ones(p), np.zeros(c), np.ones(c))

    @classmethod
    def fit(cls, thetas, xs, floor: float = 1e-8) -> Standardizer:
        thetas = np.asarray(thetas, dtype=float)
        xs = np.asarray(xs, dtype=float)
        t_sd = thetas.std(axis=0)
        x_sd = xs.std(axis=0)
        return cls(thetas.mean(axis=0), np.where(t_sd > floor, t_sd, 1.0),
                   xs.mean(axis=0), np.where(x_sd > floor, x_sd, 1.0))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("theta_mean", "theta_sd", "x_mean", "x_sd")}

    @classmethod
    def from_dict(cls, d) -> Standardizer:
        return cls(*(np.array(d[k], dtype=float) for k in ("theta_mean", "theta_sd", "x_mean", "x_sd")))


class MafModel:
    """Stack of conditional MADE affine transforms over a standard normal base."""

    def __init__(self, p: int, context_dim: int, num_transforms: int = 5, hidden_units: int = 50,
                 hidden_layers: int = 2, seed: int = 0, standardizer: Standardizer | None = None):
        self.p = p
        self.context_dim = context_dim
        self.num_transforms = num_transforms
        self.hidden_units = hidden_units
        self.hidden_layers = hidden_layers
        self.seed = seed
        self.standardizer = standardizer or Standardizer.identity(p, context_dim)
        rng = np.random.default_rng(seed)
        self.masks = [made_masks(p, hidden_units, hidden_layers, rng) for _ in range(num_transforms)]
        self.params = self._init_params(rng)

    def _init_params(self, rng) -> dict[str, np.ndarray]:
        H, p, c = self.hidden_units, self.p, self.context_dim
        params = {}
        for t in range(self.num_transforms):
            bound = 1.0 / math.sqrt(p + c)
            params[f"{t}.W0"] = rng.uniform(-bound, bound, (H, p))
            params[f"{t}.V"] = rng.uniform(-bound, bound, (H, c))
            params[f"{t}.b0"] = np.zeros(H)
            for layer in range(1, self.hidden_layers):
                bound = 1.0 / math.sqrt(H)
                params[f"{t}.W{layer}"] = rng.uniform(-bound, bound, (H, H))
                params[f"{t}.b{layer}"] = np.zeros(H)
            # zero output layer: the untrained flow is the identity map
            params[f"{t}.Wm"] = np.zeros((p, H))
            params[f"{t}.bm"] = np.zeros(p)
            params[f"{t}.Wa"] = np.zeros((p, H))
            params[f"{t}.ba"] = np.zeros(p)
        return params

    @property
    def architecture(self) -> dict:
        return {
            "p": self.p,
            "context_dim": self.context_dim,
            "num_transforms": self.num_transforms,
            "hidden_units": self.hidden_units,
            "hidden_layers": self.hidden_layers,
        }

    def copy(self) -> MafModel:
        clone = MafModel.__new__(MafModel)
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        clone.standardizer = Standardizer(**{k: v.copy() for k, v in vars(self.standardizer).items()})
        return clone

    def set_params(self, params: dict[str, np.ndarray]):
        self.params = {k: np.array(v, dtype=float) for k, v in params.items()}

    # -- one MADE transform ---------------------------------------------------

    def _made(self, t: int, u: np.ndarray, xs: np.ndarray):
        P, M = self.params, self.masks[t]
        hs = []
        h = np.tanh(u @ (P[f"{t}.W0"] * M[0]).T + xs @ P[f"{t}.V"].T + P[f"{t}.b0"])
        hs.append(h)
        for layer in range(1, self.hidden_layers):
            h = np.tanh(h @ (P[f"{t}.W{layer}"] * M[layer]).T + P[f"{t}.b{layer}"])
            hs.append(h)
        mo = M[-1]
        mu = h @ (P[f"{t}.Wm"] * mo).T + P[f"{t}.bm"]
        r = h @ (P[f"{t}.Wa"] * mo).T + P[f"{t}.ba"]
        squash = np.tanh(r / ALPHA_BOUND)
        alpha = ALPHA_BOUND * squash
        return mu, alpha, squash, hs

    def made_outputs(self, t: int, u, x):
        """``(mu, alpha)`` of transform ``t`` at standardised inputs (for mask checks)."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        xs = np.broadcast_to(np.atleast_2d(np.asarray(x, dtype=float)), (len(u), self.context_dim))
        mu, alpha, _, _ = self._made(t, u, xs)
        return mu, alpha

    # -- density direction ----------------------------------------------------

    def _prepare(self, thetas, xs):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        if thetas.shape[1] != self.p or xs.shape[1] != self.context_dim:
            raise ValueError(f"expected theta dim {self.p} and x dim {self.context_dim}, "
                             f"got {thetas.shape} and {xs.shape}")
        if len(xs) == 1 and len(thetas) > 1:
            xs = np.broadcast_to(xs, (len(thetas), self.context_dim))
        if len(xs) != len(thetas):
            raise ValueError("theta and x batches have different lengths")
        if not (np.all(np.isfinite(thetas)) and np.all(np.isfinite(xs))):
            raise ValueError("non-finite input to the flow")
        s = self.standardizer
        return (thetas - s.theta_mean) / s.theta_sd, (xs - s.x_mean) / s.x_sd

    def _forward(self, u, xs, keep: bool):
        caches = []
        logdet = np.zeros(len(u))
        for t in range(self.num_transforms):
            if t > 0:
                u = u[:, ::-1]
            mu, alpha, squash, hs = self._made(t, u, xs)
            scale = np.exp(-alpha)
            out = (u - mu) * scale
            logdet -= alpha.sum(axis=1)
            if keep:
                caches.append((u, hs, squash, scale, out))
            u = out
        return u, logdet, caches

    def forward(self, thetas, xs):
        """Base-space image ``z`` and the flow's log-determinant (standardiser excluded)."""
        u, xs = self._prepare(thetas, xs)
        z, logdet, _ = self._forward(u, xs, keep=False)
        return z, logdet

    def log_prob(self, thetas, xs) -> np.ndarray:
        """log q(theta | x) in raw parameter units, one value per row."""
        z, logdet = self.forward(thetas, xs)
        base = -0.5 * np.sum(z**2, axis=1) - self.p * _HALF_LOG_2PI
        return base + logdet - np.log(self.standardizer.theta_sd).sum()

    def log_prob_and_grad(self, thetas, xs, weights):
        """``log q`` per row and the gradient of ``sum(weights * log q)`` w.r.t. the weights."""
        u, xs = self._prepare(thetas, xs)
        weights = np.asarray(weights, dtype=float).reshape(-1)
        z, logdet, caches = self._forward(u, xs, keep=True)
        logq = -0.5 * np.sum(z**2, axis=1) - self.p * _HALF_LOG_2PI + logdet
        logq -= np.log(self.standardizer.theta_sd).sum()

        P = self.params
        grads = {}
        g = -weights[:, None] * z
        for t in reversed(range(self.num_transforms)):
            M = self.masks[t]
            u_in, hs, squash, scale, out = caches[t]
            g_alpha = -g * out - weights[:, None]
            g_mu = -g * scale
            g_r = g_alpha * (1.0 - squash**2)
            h = hs[-1]
            mo = M[-1]
            grads[f"{t}.Wm"] = (g_mu.T @ h) * mo
            grads[f"{t}.bm"] = g_mu.sum(axis=0)
            grads[f"{t}.Wa"] = (g_r.T @ h) * mo
            grads[f"{t}.ba"] = g_r.sum(axis=0)
            g_h = g_mu @ (P[f"{t}.Wm"] * mo) + g_r @ (P[f"{t}.Wa"] * mo)
            for layer in range(self.hidden_layers - 1, 0, -1):
                g_a = g_h * (1.0 - hs[layer] ** 2)
                w_masked = P[f"{t}.W{layer}"] * M[layer]
                grads[f"{t}.W{layer}"] = (g_a.T @ hs[layer - 1]) * M[layer]
                grads[f"{t}.b{layer}"] = g_a.sum(axis=0)
                g_h = g_a @ w_masked
            g_a = g_h * (1.0 - hs[0] ** 2)
            grads[f"{t}.W0"] = (g_a.T @ u_in) * M[0]
            grads[f"{t}.V"] = g_a.T @ xs
            grads[f"{t}.b0"] = g_a.sum(axis=0)
            g = g * scale + g_a @ (P[f"{t}.W0"] * M[0])
            if t > 0:
                g = g[:, ::-1]
        return logq, grads

    # -- sampling direction ---------------------------------------------------

    def _made_column(self, t: int, u: np.ndarray, context: np.ndarray, i: int, bufs):
        """``(mu_i, alpha_i)`` of transform ``t``, reusing buffers; ``context`` is x V^T + b0."""
        P, M = self.params, self.masks[t]
        h = bufs[0]
        np.matmul(u, (P[f"{t}.W0"] * M[0]).T, out=h)
        h += context
        np.tanh(h, out=h)
        for layer in range(1, self.hidden_layers):
            nxt = bufs[layer % 2]
            np.matmul(h, np.ascontiguousarray((P[f"{t}.W{layer}"] * M[layer]).T), out=nxt)
            nxt += P[f"{t}.b{layer}"]
            np.tanh(nxt, out=nxt)
            h = nxt
        mo = M[-1][i]
        mu = h @ (P[f"{t}.Wm"][i] * mo) + P[f"{t}.bm"][i]
        r = h @ (P[f"{t}.Wa"][i] * mo) + P[f"{t}.ba"][i]
        return mu, ALPHA_BOUND * np.tanh(r / ALPHA_BOUND)

    def inverse(self, z, x) -> np.ndarray:
        """Map base draws back to raw parameters, coordinate by coordinate."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        s = self.standardizer
        xs = (np.atleast_2d(np.asarray(x, dtype=float)) - s.x_mean) / s.x_sd
        if len(xs) != 1:
            xs = np.broadcast_to(xs, (len(z), self.context_dim))
        bufs = [np.empty((len(z), self.hidden_units)) for _ in range(2)]
        out = z
        for t in reversed(range(self.num_transforms)):
            u = np.zeros_like(out)
            # coordinate 0 sees only the context, so one row per context suffices
            mu, alpha, _, _ = self._made(t, u[: len(xs)], xs)
            u[:, 0] = out[:, 0] * np.exp(alpha[:, 0]) + mu[:, 0]
            context = xs @ self.params[f"{t}.V"].T + self.params[f"{t}.b0"]
            for i in range(1, self.p):
                mu_i, alpha_i = self._made_column(t, u, context, i, bufs)
                u[:, i] = out[:, i] * np.exp(alpha_i) + mu_i
            out = u[:, ::-1] if t > 0 else u
        return out * s.theta_sd + s.theta_mean

    def sample(self, x, count: int, rng: np.random.Generator) -> np.ndarray:
        if count < 1:
            raise ValueError("count must be >= 1")
        z = rng.standard_normal((count, self.p))
        return self.inverse(z, x)

    # -- persistence ----------------------------------------------------------

    def to_dict(self, stats_config=None) -> dict:
        doc = {
            "format_version": FORMAT_VERSION,
            "stat_set": list(stats_config.stat_set) if stats_config else None,
            "decay": stats_config.decay if stats_config else None,
            "standardizer": self.standardizer.to_dict(),
            "architecture": self.architecture,
            "parameters": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                           for k, v in self.params.items()},
            "rng_seed": self.seed,
        }
        return doc

    @classmethod
    def from_dict(cls, doc) -> MafModel:
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {doc.get('format_version')}")
        model = cls(**doc["architecture"], seed=doc["rng_seed"],
                    standardizer=Standardizer.from_dict(doc["standardizer"]))
        params = {}
        for name, entry in doc["parameters"].items():
            params[name] = np.array(entry["data"], dtype=float).reshape(entry["shape"])
        if set(params) != set(model.params):
            raise ValueError("checkpoint parameters do not match the architecture")
        for name, value in params.items():
            if value.shape != model.params[name].shape:
                raise ValueError(f"parameter {name} has shape {value.shape}")
        model.params = params
        return model

    def save(self, path, stats_config=None):
        Path(path).write_text(json.dumps(self.to_dict(stats_config)))

    @classmethod
    def load(cls, path) -> MafModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def forward(model: MafModel, theta, x):
    return model.forward(theta, x)


def log_prob(model: MafModel, theta, x) -> np.ndarray:
    return model.log_prob(theta, x)


def sample(model: MafModel, x, count: int, rng: np.random.Generator) -> np.ndarray:
    return model.sample(x, count, rng)


def nll_grad(model: MafModel, thetas, xs):
    """Mean negative log-likelihood over the batch and its parameter gradients."""
    thetas = np.atleast_2d(thetas)
    if len(thetas) == 0:
        raise ValueError("empty batch")
    n = len(thetas)
    logq, grads = model.log_prob_and_grad(thetas, xs, np.full(n, -1.0 / n))
    return -float(logq.mean()), grads


class AdamState:
    """Adam with bias correction over a dict of named arrays."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Update ``params`` in place and return them."""
        if set(grads) != set(self.m):
            raise ValueError("gradient names do not match optimizer state")
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for k, g in grads.items():
            if g.shape != self.m[k].shape or params[k].shape != g.shape:
                raise ValueError(f"shape mismatch for {k}: {g.shape} vs {self.m[k].shape}")
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return params


def adam_step(state: AdamState, params, grads):
    return state.step(params, grads)
