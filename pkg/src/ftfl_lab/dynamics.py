"""Probabilistic ensemble world model.

K swish MLPs (run as one stacked network) regress the vector
``[state target || reward]`` with a heteroskedastic Gaussian NLL.  Two
switches select the target representation:

* ``target_mode``: ``residual`` regresses ``s' - s``, ``direct`` regresses ``s'``;
* ``target_norm``: unit-normalize each target column with its own stats.

Inputs ``[s || a]`` are always unit-normalized.  All statistics are refit on
the full visible buffer at every retrain.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import MlpSpec, Network, sigmoid, softplus
from .normalization import RunningStats, fit_stats
from .replay import Batch, ReplayBuffer

log = logging.getLogger(__name__)

TARGET_MODES = ("residual", "direct")


@dataclass
class EnsembleConfig:
    n_members: int = 7
    n_elites: int = 5
    hidden_dims: tuple[int, ...] = (200, 200)
    activation: str = "swish"
    target_mode: str = "residual"
    target_norm: bool = False
    logvar_min: float = -10.0
    logvar_max: float = 0.5
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.5e-4
    batch_size: int = 256
    retrain_interval: int = 250
    holdout_fraction: float = 0.1
    max_epochs: int = 8
    patience: int = 1
    epoch_batches: int = 0  # minibatches per epoch; 0 means one pass over the training split

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"target_mode must be one of {TARGET_MODES}, got {self.target_mode!r}")
        if not 1 <= self.n_elites <= self.n_members:
            raise ValueError("need 1 <= n_elites <= n_members")
        if not self.logvar_min < self.logvar_max:
            raise ValueError("logvar_min must be < logvar_max")
        if not 0.0 < self.holdout_fraction < 0.5:
            raise ValueError("holdout_fraction must lie in (0, 0.5)")
        if self.epoch_batches < 0:
            raise ValueError("epoch_batches must be >= 0")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1 or self.retrain_interval < 1:
            raise ValueError("max_epochs, patience, batch_size and retrain_interval must be >= 1")


@dataclass(frozen=True)
class TargetStats:
    """Statistics of raw targets; tied to the mode they were fitted under."""

    mode: str
    state: RunningStats
    reward: RunningStats


@dataclass
class EnsemblePrediction:
    mean: np.ndarray
    logvar: np.ndarray


@dataclass
class TrainReport:
    holdout_mse: np.ndarray
    epochs: int
    elites: list[int]
    train_loss: float
    holdout_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def elite_mse(self) -> float:
        return float(np.mean(self.holdout_mse[self.elites]))


@dataclass
class RewardProbe:
    mean_bias: float
    rmse: float
    pairs: np.ndarray  # columns: real reward, predicted reward


def raw_state_targets(batch: Batch, mode: str) -> np.ndarray:
    if mode == "residual":
        return batch.next_states - batch.states
    if mode == "direct":
        return batch.next_states.copy()
    raise ValueError(f"unknown target mode {mode!r}")


def fit_target_stats(batch: Batch, mode: str) -> TargetStats:
    return TargetStats(mode, fit_stats(raw_state_targets(batch, mode)), fit_stats(batch.rewards[:, None]))


def build_targets(batch: Batch, mode: str, norm: bool, stats: TargetStats | None = None) -> np.ndarray:
    """Rows ``[state_target || reward]``, optionally unit-normalized per column."""
    st = raw_state_targets(batch, mode)
    r = batch.rewards[:, None]
    if norm:
        if stats is None:
            raise ValueError("target normalization requested without fitted stats")
        if stats.mode != mode:
            raise ValueError(f"stats were fitted for {stats.mode!r} targets, not {mode!r}")
        st = stats.state.normalize(st)
        r = stats.reward.normalize(r)
    return np.concatenate([st, r], axis=1)


def bound_logvar(raw, logvar_min: float, logvar_max: float):
    """Softly squash log-variances into ``(logvar_min, logvar_max)``."""
    upper = logvar_max - softplus(logvar_max - raw)
    return logvar_min + softplus(upper - logvar_min)


def bound_logvar_grad(raw, logvar_min: float, logvar_max: float):
    """Elementwise derivative of :func:`bound_logvar`."""
    upper = logvar_max - softplus(logvar_max - raw)
    return sigmoid(logvar_max - raw) * sigmoid(upper - logvar_min)


def gaussian_nll(mean, logvar, target, return_terms: bool = False):
    """Mean over dims (and rows) of ``(mean - t)^2 exp(-logvar) + logvar``.

    Leading axes beyond (rows, dims) are summed, so a stacked ensemble's loss
    is the sum of its members' losses.  With ``return_terms`` also returns
    the error term and the variance term separately.
    """
    mean, logvar, target = (np.asarray(v, dtype=np.float64) for v in (mean, logvar, target))
    if mean.shape != logvar.shape or np.broadcast_shapes(mean.shape, target.shape) != mean.shape:
        raise ValueError("mean, logvar and target shapes disagree")
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(logvar)) and np.all(np.isfinite(target))):
        raise FloatingPointError("non-finite input to gaussian_nll")
    per = mean.shape[-1] * (mean.shape[-2] if mean.ndim >= 2 else 1)
    err = (mean - target) ** 2 * np.exp(-logvar)
    error_term = err.sum() / per
    variance_term = logvar.sum() / per
    loss = error_term + variance_term
    if return_terms:
        return loss, error_term, variance_term
    return loss


def gaussian_nll_grads(mean, logvar, target):
    """``(loss, dloss/dmean, dloss/dlogvar)`` for :func:`gaussian_nll`."""
    per = mean.shape[-1] * (mean.shape[-2] if mean.ndim >= 2 else 1)
    inv_var = np.exp(-logvar)
    diff = mean - target
    sq = diff * diff * inv_var
    loss = (sq.sum() + logvar.sum()) / per
    return loss, 2.0 * diff * inv_var / per, (1.0 - sq) / per


def select_elites(holdout_mse, k: int) -> list[int]:
    """Indices of the ``k`` smallest errors, ties resolved toward lower index."""
    mse = np.asarray(holdout_mse, dtype=np.float64)
    if k > mse.size or k < 1:
        raise ValueError(f"cannot pick {k} elites from {mse.size} members")
    if not np.all(np.isfinite(mse)):
        raise ValueError("holdout errors must be finite")
    return sorted(int(i) for i in np.argsort(mse, kind="stable")[:k])


class DynamicsEnsemble:
    def __init__(self, state_dim: int, action_dim: int, config: EnsembleConfig, rng: np.random.Generator):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.config = config
        self.out_dim = state_dim + 1
        spec = MlpSpec(state_dim + action_dim, config.hidden_dims, 2 * self.out_dim, config.activation)
        self.net = Network.create(spec, rng, n_stack=config.n_members, lr=config.lr,
                                  beta1=config.beta1, beta2=config.beta2, eps=config.eps)
        self.input_stats: RunningStats | None = None
        self.target_stats: TargetStats | None = None
        self.elites: list[int] = list(range(config.n_elites))
        self.trained = False
        self.n_retrains = 0

    # -- raw network -----------------------------------------------------

    def _split(self, out: np.ndarray) -> EnsemblePrediction:
        c = self.config
        raw_lv = out[..., self.out_dim:]
        return EnsemblePrediction(out[..., :self.out_dim], bound_logvar(raw_lv, c.logvar_min, c.logvar_max))

    def predict_normalized(self, states, actions) -> EnsemblePrediction:
        """Per-member predictions in target space, shape ``(K, n, d_s + 1)``."""
        if not self.trained:
            raise RuntimeError("ensemble has not been trained yet")
        x = self.input_stats.normalize(np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1))
        return self._split(self.net(x))

    def loss_and_grads(self, x: np.ndarray, targets: np.ndarray):
        """NLL summed over members for stacked inputs ``x`` ``(K, B, in)``."""
        c = self.config
        out, cache = self.net.forward_cached(x)
        raw_lv = out[..., self.out_dim:]
        mean = out[..., :self.out_dim]
        logvar = bound_logvar(raw_lv, c.logvar_min, c.logvar_max)
        loss, d_mean, d_lv = gaussian_nll_grads(mean, logvar, targets)
        d_raw = d_lv * bound_logvar_grad(raw_lv, c.logvar_min, c.logvar_max)
        grads, _ = self.net.backward_cached(cache, np.concatenate([d_mean, d_raw], axis=-1), need_input=False)
        return loss, grads

    # -- training ----------------------------------------------------------

    def refit_stats(self, data: Batch) -> None:
        self.input_stats = fit_stats(np.concatenate([data.states, data.actions], axis=1))
        self.target_stats = fit_target_stats(data, self.config.target_mode)

    def targets(self, data: Batch) -> np.ndarray:
        return build_targets(data, self.config.target_mode, self.config.target_norm, self.target_stats)

    def holdout_mse(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        mean = self.net(x)[..., :self.out_dim]
        return ((mean - t) ** 2).mean(axis=(-1, -2))

    def train(self, buffer: ReplayBuffer, rng: np.random.Generator) -> TrainReport:
        c = self.config
        n = buffer.effective_size
        if n < 2 * c.batch_size:
            raise ValueError(f"need at least {2 * c.batch_size} transitions to train, have {n}")
        data = buffer.all()
        self.refit_stats(data)
        x_all = self.input_stats.normalize(np.concatenate([data.states, data.actions], axis=1))
        t_all = self.targets(data)

        perm = rng.permutation(n)
        n_hold = max(1, int(round(c.holdout_fraction * n)))
        hold, train = perm[:n_hold], perm[n_hold:]
        x_hold, t_hold = x_all[hold], t_all[hold]
        x_tr, t_tr = x_all[train], t_all[train]
        n_tr = train.size
        batches_per_epoch = c.epoch_batches or int(np.ceil(n_tr / c.batch_size))

        K = c.n_members
        # the pre-training weights are not a candidate: a stale model must move
        best = np.full(K, np.inf)
        best_params = self.net.copy_params()
        stall = np.zeros(K, dtype=int)
        epochs = 0
        losses = []
        for epoch in range(c.max_epochs):
            for _ in range(batches_per_epoch):
                idx = rng.integers(0, n_tr, size=(K, c.batch_size))
                loss, grads = self.loss_and_grads(x_tr[idx], t_tr[idx])
                if not np.isfinite(loss):
                    raise FloatingPointError(f"non-finite ensemble loss at retrain {self.n_retrains}")
                self.net.step(grads)
                losses.append(loss)
            epochs = epoch + 1
            mse = self.holdout_mse(x_hold, t_hold)
            with np.errstate(invalid="ignore"):
                improved = ~np.isfinite(best) | ((best - mse) / np.maximum(np.abs(best), 1e-12) > 1e-3)
            for k in np.flatnonzero(mse < best):
                for bp, p in zip(best_params, self.net.params):
                    bp[k] = p[k]
            best = np.minimum(best, mse)
            stall = np.where(improved, 0, stall + 1)
            if np.all(stall >= c.patience):
                break
        # keep each member's best snapshot
        for bp, p in zip(best_params, self.net.params):
            p[...] = bp
        self.elites = select_elites(best, c.n_elites)
        self.trained = True
        self.n_retrains += 1
        train_loss = float(np.mean(losses[-batches_per_epoch:])) if losses else float("nan")
        return TrainReport(best, epochs, list(self.elites), train_loss, np.sort(hold))

    # -- prediction --------------------------------------------------------

    def _to_env_space(self, states, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        st, r = z[..., :self.state_dim], z[..., self.state_dim:]
        if self.config.target_norm:
            st = self.target_stats.state.denormalize(st)
            r = self.target_stats.reward.denormalize(r)
        if self.config.target_mode == "residual":
            st = st + states
        return st, r[..., 0]

    def predict_batch(self, states, actions, rng: np.random.Generator, deterministic: bool = False):
        """One-step predictions for many rows, each from a uniformly drawn elite."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        pred = self.predict_normalized(states, actions)
        n = states.shape[0]
        member = np.asarray(self.elites)[rng.integers(0, len(self.elites), size=n)]
        rows = np.arange(n)
        mu = pred.mean[member, rows]
        if deterministic:
            z = mu
        else:
            z = mu + np.exp(0.5 * pred.logvar[member, rows]) * rng.standard_normal(mu.shape)
        return self._to_env_space(states, z)

    def predict_step(self, s, a, rng: np.random.Generator, deterministic: bool = False):
        s2, r = self.predict_batch(np.asarray(s)[None], np.asarray(a)[None], rng, deterministic)
        return s2[0], float(r[0])

    # -- diagnostics -------------------------------------------------------

    def variance_diagnostic(self, batch: Batch) -> float:
        """Mean predicted variance over target dims, all members and all rows."""
        if len(batch) == 0:
            raise ValueError("variance diagnostic needs a nonempty batch")
        pred = self.predict_normalized(batch.states, batch.actions)
        return float(np.mean(np.exp(pred.logvar)))

    def reward_bias_probe(self, buffer: ReplayBuffer, n: int, rng: np.random.Generator) -> RewardProbe:
        return reward_bias_probe(self, buffer, n, rng)


def reward_bias_probe(model, buffer: ReplayBuffer, n: int, rng: np.random.Generator) -> RewardProbe:
    """Compare deterministic model rewards with real ones on ``n`` sampled transitions."""
    if buffer.effective_size == 0:
        raise ValueError("reward probe needs a nonempty buffer")
    batch = buffer.sample_batch(n, rng)
    _, r_hat = model.predict_batch(batch.states, batch.actions, rng, deterministic=True)
    err = r_hat - batch.rewards
    return RewardProbe(float(err.mean()), float(np.sqrt(np.mean(err ** 2))),
                       np.stack([batch.rewards, r_hat], axis=1))
