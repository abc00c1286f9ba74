"""Amortised NPE and sequential SNPE training with the atomic loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .exchange import PriorSpec
from .flow import AdamState, MafModel, Standardizer, nll_grad
from .simulate import SimConfig, TrainingSet, item_seed, simulate_stats_batch

log = logging.getLogger(__name__)

SUPPORT_SDS = 6.0
MAX_REJECTION = 0.99


class LeakageError(RuntimeError):
    """Nearly all flow draws fall outside the prior support box."""


class TrainingError(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class NpeConfig:
    B: int = 50_000
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 5e-4
    validation_fraction: float = 0.1
    early_stop_patience: int = 20
    seed: int = 0
    num_transforms: int = 5
    hidden_units: int = 50
    hidden_layers: int = 2

    def __post_init__(self):
        if not self.B >= self.batch_size >= 1:
            raise ValueError(f"need B >= batch_size >= 1, got B={self.B}, batch_size={self.batch_size}")
        if not 0.0 <= self.validation_fraction <= 0.5:
            raise ValueError("validation_fraction must lie in [0, 0.5]")
        if self.epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("epochs and early_stop_patience must be positive")


@dataclass(frozen=True)
class SnpeConfig(NpeConfig):
    rounds: int = 5
    per_round_B: int = 1000
    atoms_per_batch: int = 10
    x_obs: tuple[float, ...] | None = None
    diagnostic_draws: int = 10_000

    def __post_init__(self):
        super().__post_init__()
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.x_obs is None:
            raise ValueError("SNPE needs an observation x_obs")
        if not 2 <= self.atoms_per_batch <= self.batch_size:
            raise ValueError("need 2 <= atoms_per_batch <= batch_size")
        if self.per_round_B < self.batch_size:
            raise ValueError("per_round_B must be >= batch_size")
        object.__setattr__(self, "x_obs", tuple(float(v) for v in self.x_obs))

    def npe(self) -> NpeConfig:
        base = {f: getattr(self, f) for f in NpeConfig.__dataclass_fields__}
        base["B"] = self.per_round_B
        return NpeConfig(**base)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    initial_val_loss: float = float("nan")
    best_val_loss: float = float("nan")
    best_epoch: int = 0


def _seq(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def simulate_prior_round(prior: PriorSpec, B: int, sim: SimConfig, workers: int = 1) -> TrainingSet:
    """Round-0 training pairs: theta from the prior, one simulated x per theta."""
    if B < 1:
        raise ValueError("B must be >= 1")
    thetas = prior.sample(B, _seq(sim.seed, 1))
    return simulate_stats_batch(thetas, sim, workers=workers, round=0)


# -- losses ------------------------------------------------------------------


def _atom_index(n: int, atoms: int, rng: np.random.Generator) -> np.ndarray:
    """Row ``b`` lists ``b`` followed by ``atoms - 1`` distinct other rows."""
    if atoms > n:
        raise ValueError(f"cannot draw {atoms} atoms from a batch of {n}")
    picks = np.argsort(rng.random((n, n - 1)), axis=1)[:, : atoms - 1]
    picks += picks >= np.arange(n)[:, None]
    return np.column_stack([np.arange(n), picks])


def atomic_loss_grad(model: MafModel, thetas, xs, prior: PriorSpec, atoms: int, rng: np.random.Generator):
    """Mean atomic (proposal-posterior) negative log-likelihood and its gradients."""
    n, p = thetas.shape
    idx = _atom_index(n, atoms, rng)
    atom_thetas = thetas[idx].reshape(-1, p)
    atom_xs = np.repeat(xs, atoms, axis=0)
    log_prior = prior.log_prob(atom_thetas).reshape(n, atoms)

    def logits_of(logq):
        return logq.reshape(n, atoms) - log_prior

    logq = model.log_prob(atom_thetas, atom_xs)
    logits = logits_of(logq)
    lse = logsumexp(logits, axis=1)
    loss = -float(np.mean(logits[:, 0] - lse))
    soft = np.exp(logits - lse[:, None])
    dloss = soft / n
    dloss[:, 0] -= 1.0 / n
    _, grads = model.log_prob_and_grad(atom_thetas, atom_xs, dloss.ravel())
    return loss, grads


def _atomic_loss(model, thetas, xs, prior, atoms, rng) -> float:
    n, p = thetas.shape
    idx = _atom_index(n, atoms, rng)
    logq = model.log_prob(thetas[idx].reshape(-1, p), np.repeat(xs, atoms, axis=0)).reshape(n, atoms)
    logits = logq - prior.log_prob(thetas[idx].reshape(-1, p)).reshape(n, atoms)
    return -float(np.mean(logits[:, 0] - logsumexp(logits, axis=1)))


def atomic_log_prob(model, theta, x, atoms, prior: PriorSpec) -> float:
    """log of (q(theta|x)/prior(theta)) normalised over the atom set."""
    atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
    theta = np.asarray(theta, dtype=float)
    if len(atoms) < 2:
        raise ValueError("need at least two atoms")
    hits = np.flatnonzero(np.all(atoms == theta, axis=1))
    if len(hits) == 0:
        raise ValueError("theta must be one of the atoms")
    logits = model.log_prob(atoms, np.atleast_2d(x)) - prior.log_prob(atoms)
    return float(logits[hits[0]] - logsumexp(logits))


# -- training loop -------------------------------------------------------------


def _split(n: int, fraction: float, rng):
    order = rng.permutation(n)
    n_val = int(round(n * fraction))
    if n_val == 0 or n_val == n:
        return order, order[:0]
    return order[n_val:], order[:n_val]


def _fit(model: MafModel, thetas, xs, cfg: NpeConfig, loss_grad, eval_loss) -> TrainHistory:
    rng = _seq(cfg.seed, 2)
    train_idx, val_idx = _split(len(thetas), cfg.validation_fraction, rng)
    sel_idx = val_idx if len(val_idx) else train_idx
    hist = TrainHistory()
    best = {k: v.copy() for k, v in model.params.items()}
    best_loss = hist.initial_val_loss = eval_loss(model, thetas[sel_idx], xs[sel_idx])
    opt = AdamState(model.params, lr=cfg.learning_rate)
    bs = min(cfg.batch_size, len(train_idx))
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(order) - bs + 1, bs):
            rows = order[start : start + bs]
            loss, grads = loss_grad(model, thetas[rows], xs[rows], rng)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            opt.step(model.params, grads)
            losses.append(loss)
        val = eval_loss(model, thetas[sel_idx], xs[sel_idx])
        hist.train_loss.append(float(np.mean(losses)))
        hist.val_loss.append(val)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        if val < best_loss:
            best_loss = val
            best = {k: v.copy() for k, v in model.params.items()}
            hist.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    model.params = best
    hist.best_val_loss = best_loss
    log.info("trained %d epochs, best validation loss %.4f at epoch %d", len(hist.val_loss), best_loss,
             hist.best_epoch)
    return hist


def _mean_nll(model, thetas, xs, chunk=20_000) -> float:
    total = 0.0
    for s in range(0, len(thetas), chunk):
        total -= model.log_prob(thetas[s : s + chunk], xs[s : s + chunk]).sum()
    return total / len(thetas)


def new_model(train: TrainingSet, cfg: NpeConfig) -> MafModel:
    return MafModel(train.dim, train.xs.shape[1], cfg.num_transforms, cfg.hidden_units, cfg.hidden_layers,
                    seed=cfg.seed, standardizer=Standardizer.fit(train.thetas, train.xs))


def train_npe(train: TrainingSet, cfg: NpeConfig, model: MafModel | None = None):
    """Fit q(theta | x) by minibatch Adam on the mean negative log-likelihood.

    Returns ``(model, history)``; the model carries the parameters with the best
    validation loss (the initial parameters count as a candidate).
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    if model is None:
        if np.any(train.rounds != 0):
            raise ValueError("amortised NPE trains on prior-round (round 0) pairs only")
        model = new_model(train, cfg)

    def loss_grad(m, th, x, _rng):
        return nll_grad(m, th, x)

    hist = _fit(model, train.thetas, train.xs, cfg, loss_grad, _mean_nll)
    return model, hist


def train_atomic(model: MafModel, train: TrainingSet, cfg: NpeConfig, prior: PriorSpec, atoms: int):
    """Continue training ``model`` on all pairs with the atomic loss."""

    def loss_grad(m, th, x, rng):
        return atomic_loss_grad(m, th, x, prior, atoms, rng)

    def eval_loss(m, th, x):
        rng = _seq(cfg.seed, 3)
        total, count = 0.0, 0
        for s in range(0, len(th), cfg.batch_size):
            rows = slice(s, s + cfg.batch_size)
            size = len(th[rows])
            if size < atoms:
                break
            total += _atomic_loss(m, th[rows], x[rows], prior, atoms, rng) * size
            count += size
        return total / count if count else _atomic_loss(m, th, x, prior, min(atoms, len(th)), rng)

    return model, _fit(model, train.thetas, train.xs, cfg, loss_grad, eval_loss)


# -- sampling ------------------------------------------------------------------


def support_box(prior: PriorSpec, sds: float = SUPPORT_SDS):
    return prior.mean - sds * prior.sd, prior.mean + sds * prior.sd


def posterior_sample(model, x_obs, count: int, prior: PriorSpec, truncate: bool = False,
                     rng: np.random.Generator | None = None):
    """Flow draws at ``x_obs`` and the fraction falling outside the prior support box.

    With ``truncate`` the out-of-box draws are rejected and replaced; a
    rejection fraction above 99% raises ``LeakageError``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = rng or np.random.default_rng()
    lo, hi = support_box(prior)
    if not truncate:
        draws = model.sample(x_obs, count, rng)
        outside = ~np.all((draws >= lo) & (draws <= hi), axis=1)
        return draws, float(outside.mean())
    kept, drawn, rejected = [], 0, 0
    have = 0
    while have < count:
        batch = model.sample(x_obs, max(count - have, 1000), rng)
        inside = np.all((batch >= lo) & (batch <= hi), axis=1)
        drawn += len(batch)
        rejected += int((~inside).sum())
        if rejected / drawn > MAX_REJECTION:
            raise LeakageError(f"{rejected / drawn:.2%} of flow draws fall outside the prior support box")
        kept.append(batch[inside])
        have += int(inside.sum())
    return np.concatenate(kept)[:count], rejected / drawn


# -- SNPE ----------------------------------------------------------------------


@dataclass
class RoundDiagnostics:
    round: int
    n_train: int
    history: TrainHistory
    posterior_mean: np.ndarray
    posterior_sd: np.ndarray
    leakage: float
    model: MafModel = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "n_train": self.n_train,
            "train_loss": self.history.train_loss,
            "val_loss": self.history.val_loss,
            "initial_val_loss": self.history.initial_val_loss,
            "best_val_loss": self.history.best_val_loss,
            "best_epoch": self.history.best_epoch,
            "posterior_mean": self.posterior_mean.tolist(),
            "posterior_sd": self.posterior_sd.tolist(),
            "leakage": self.leakage,
        }


def train_snpe(cfg: SnpeConfig, prior: PriorSpec, sim: SimConfig, workers: int = 1, on_round=None):
    """Sequential NPE targeting the posterior at ``cfg.x_obs``.

    Round 1 is amortised NPE on prior draws. Each later round draws
    parameters from the current q(. | x_obs), simulates, appends the pairs to
    the cumulative set and continues training with the atomic loss. Returns
    ``(model, diagnostics)`` with one ``RoundDiagnostics`` per round.
    """
    x_obs = np.array(cfg.x_obs)
    base = cfg.npe()
    data = simulate_prior_round(prior, cfg.per_round_B, sim, workers)
    model, hist = train_npe(data, base)
    diagnostics = [_diagnose(model, 1, data, hist, x_obs, prior, cfg)]
    if on_round:
        on_round(diagnostics[-1])
    for t in range(2, cfg.rounds + 1):
        rng = _seq(item_seed(cfg.seed, t), 4)
        proposals, _ = posterior_sample(model, x_obs, cfg.per_round_B, prior, truncate=False, rng=rng)
        new = simulate_stats_batch(proposals, replace(sim, seed=item_seed(sim.seed, t)), workers=workers,
                                   round=t - 1)
        data = data.extend(new)
        model = model.copy()
        model, hist = train_atomic(model, data, replace(base, seed=item_seed(cfg.seed, t)), prior,
                                   cfg.atoms_per_batch)
        diagnostics.append(_diagnose(model, t, data, hist, x_obs, prior, cfg))
        if on_round:
            on_round(diagnostics[-1])
    return model, diagnostics


def _diagnose(model, t, data, hist, x_obs, prior, cfg: SnpeConfig) -> RoundDiagnostics:
    draws, leak = posterior_sample(model, x_obs, cfg.diagnostic_draws, prior, rng=_seq(cfg.seed, 100 + t))
    log.info("round %d: %d pairs, posterior mean %s, leakage %.3f", t, len(data), draws.mean(axis=0), leak)
    return RoundDiagnostics(t, len(data), hist, draws.mean(axis=0), draws.std(axis=0, ddof=1), leak,
                            model.copy())
