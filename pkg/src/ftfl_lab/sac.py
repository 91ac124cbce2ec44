"""Soft Actor-Critic on the numpy substrate.

The twin critics are one stacked network with two members, and so are the
target critics.  Loss functions take their noise explicitly so they can be
checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import AdamState, MlpSpec, Network, adam_step, forward, softplus
from .replay import Batch

LOG_2PI = np.log(2.0 * np.pi)
# tanh rounds to exactly +-1 for |u| > ~19; keep actions strictly inside the box,
# with room to survive a float32 round trip
ACTION_LIMIT = 1.0 - 1e-6


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class SacConfig:
    gamma: float = 0.99
    tau: float = 0.995
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.5e-4
    batch_size: int = 256
    updates_per_step: int = 20
    warmup_steps: int = 1000
    init_alpha: float = 1.0
    target_entropy: float | None = None
    critic_layer_norm: bool = False
    hidden_dims: tuple[int, ...] = (256, 256)
    activation: str = "relu"
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    buffer_size: int = 1_000_000

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.init_alpha <= 0:
            raise ValueError("init_alpha must be positive")
        if self.batch_size < 1 or self.updates_per_step < 0 or self.warmup_steps < 0:
            raise ValueError("batch_size must be >= 1; updates_per_step and warmup_steps >= 0")


def squash_log_prob(u: np.ndarray, noise: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Log-density of ``tanh(u)`` where ``u = mu + exp(log_std) * noise``."""
    gauss = -0.5 * noise ** 2 - log_std - 0.5 * LOG_2PI
    # log(1 - tanh(u)^2) written so it never takes log(0)
    log_jac = 2.0 * (np.log(2.0) - u - softplus(-2.0 * u))
    return (gauss - log_jac).sum(axis=-1)


def squash(u: np.ndarray) -> np.ndarray:
    return np.clip(np.tanh(u), -ACTION_LIMIT, ACTION_LIMIT)


def polyak(target_params: list[np.ndarray], online_params: list[np.ndarray], tau: float) -> list[np.ndarray]:
    """``target <- tau * target + (1 - tau) * online`` in place; tau is the retained fraction."""
    if len(target_params) != len(online_params):
        raise ValueError("parameter lists differ in length")
    for t, o in zip(target_params, online_params):
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch {t.shape} vs {o.shape}")
        t *= tau
        t += (1.0 - tau) * o
    return target_params


class SacAgent:
    def __init__(self, state_dim: int, action_dim: int, config: SacConfig, rng: np.random.Generator):
        c = config
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.config = c
        self.target_entropy = -float(action_dim) if c.target_entropy is None else float(c.target_entropy)
        opt = dict(lr=c.lr, beta1=c.beta1, beta2=c.beta2, eps=c.eps)
        self.actor = Network.create(MlpSpec(state_dim, c.hidden_dims, 2 * action_dim, c.activation), rng, **opt)
        critic_spec = MlpSpec(state_dim + action_dim, c.hidden_dims, 1, c.activation, layer_norm=c.critic_layer_norm)
        self.critic = Network.create(critic_spec, rng, n_stack=2, **opt)
        self.target_params = self.critic.copy_params()
        self.log_alpha = np.array([np.log(c.init_alpha)])
        self.alpha_opt = AdamState.create([self.log_alpha], **opt)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    # -- policy ----------------------------------------------------------

    def _policy_head(self, out: np.ndarray):
        mu = out[..., :self.action_dim]
        raw = out[..., self.action_dim:]
        c = self.config
        log_std = np.clip(raw, c.log_std_min, c.log_std_max)
        inside = (raw > c.log_std_min) & (raw < c.log_std_max)
        return mu, log_std, inside

    def policy(self, states, noise: np.ndarray | None):
        """Squashed actions and log-probs; ``noise=None`` gives ``tanh(mu)``."""
        mu, log_std, _ = self._policy_head(self.actor(states))
        if noise is None:
            return squash(mu), None
        u = mu + np.exp(log_std) * noise
        return squash(u), squash_log_prob(u, noise, log_std)

    def actor_sample(self, s, rng: np.random.Generator, deterministic: bool = False):
        s = np.asarray(s, dtype=np.float64)
        if deterministic:
            a, _ = self.policy(s, None)
            return a, None
        noise = rng.standard_normal(s.shape[:-1] + (self.action_dim,))
        a, logp = self.policy(s, noise)
        return a, logp if logp.ndim else float(logp)

    # -- critics ---------------------------------------------------------

    def q_values(self, states, actions, target: bool = False) -> np.ndarray:
        """Both critics' estimates, shape ``(2, n)``."""
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=-1)
        params = self.target_params if target else self.critic.params
        return forward(self.critic.spec, params, x)[..., 0]

    def critic_target(self, rewards, terminals, next_states, noise: np.ndarray) -> np.ndarray:
        a2, logp2 = self.policy(next_states, noise)
        q_next = self.q_values(next_states, a2, target=True).min(axis=0)
        g = self.config.gamma
        return np.asarray(rewards) + g * (1.0 - np.asarray(terminals)) * (q_next - self.alpha * logp2)

    def critic_loss_and_grads(self, states, actions, y):
        """Sum over both critics of the batch-mean squared error to ``y``."""
        x = np.concatenate([states, actions], axis=-1)
        q, cache = self.critic.forward_cached(x)
        diff = q[..., 0] - y
        loss = float((diff ** 2).mean(axis=-1).sum())
        upstream = (2.0 * diff / diff.shape[-1])[..., None]
        grads, _ = self.critic.backward_cached(cache, upstream, need_input=False)
        self._last_q_mean = float(q.min(axis=0).mean())
        return loss, grads

    def actor_loss_and_grads(self, states, noise):
        """``mean(alpha * logp - min_i Q_i(s, a))`` with reparameterized actions."""
        out, cache = self.actor.forward_cached(states)
        mu, log_std, inside = self._policy_head(out)
        std = np.exp(log_std)
        u = mu + std * noise
        a = squash(u)
        logp = squash_log_prob(u, noise, log_std)

        x = np.concatenate([states, a], axis=-1)
        q, qcache = self.critic.forward_cached(x)
        q = q[..., 0]
        pick = np.argmin(q, axis=0)
        q_min = q[pick, np.arange(q.shape[1])]
        n = states.shape[0]
        alpha = self.alpha
        loss = float(np.mean(alpha * logp - q_min))

        upstream = np.zeros_like(q)
        upstream[pick, np.arange(n)] = 1.0
        _, dx = self.critic.backward_cached(qcache, upstream[..., None])
        dq_da = dx[:, self.state_dim:]
        dq_du = dq_da * (1.0 - a * a)
        d_mu = (alpha * 2.0 * a - dq_du) / n
        d_logstd = (alpha * (-1.0 + 2.0 * a * std * noise) - dq_du * std * noise) / n
        d_out = np.concatenate([d_mu, d_logstd * inside], axis=-1)
        grads, _ = self.actor.backward_cached(cache, d_out, need_input=False)
        return loss, grads, logp

    def alpha_loss_and_grad(self, logp) -> tuple[float, np.ndarray]:
        """``-log_alpha * mean(logp + target_entropy)``; logp treated as constant."""
        m = float(np.mean(logp) + self.target_entropy)
        return float(-self.log_alpha[0] * m), np.array([-m])

    # -- update ----------------------------------------------------------

    def update(self, batch: Batch, rng: np.random.Generator) -> dict:
        n = len(batch)
        if n == 0:
            raise ValueError("empty batch")
        y = self.critic_target(batch.rewards, batch.terminals, batch.next_states,
                               rng.standard_normal((n, self.action_dim)))
        c_loss, c_grads = self.critic_loss_and_grads(batch.states, batch.actions, y)
        a_loss, a_grads, logp = self.actor_loss_and_grads(batch.states, rng.standard_normal((n, self.action_dim)))
        al_loss, al_grad = self.alpha_loss_and_grad(logp)
        if not np.isfinite(c_loss + a_loss + al_loss):
            raise NonFiniteError(f"non-finite SAC loss: critic={c_loss} actor={a_loss} alpha={al_loss}")
        try:
            self.critic.step(c_grads)
            self.actor.step(a_grads)
            adam_step(self.alpha_opt, [self.log_alpha], [al_grad])
        except FloatingPointError as exc:
            raise NonFiniteError(str(exc)) from exc
        polyak(self.target_params, self.critic.params, self.config.tau)
        return {"critic_loss": c_loss, "actor_loss": a_loss, "alpha": self.alpha,
                "q_mean": self._last_q_mean, "entropy": float(-np.mean(logp))}


def sac_update(agent: SacAgent, batch: Batch, rng: np.random.Generator) -> dict:
    return agent.update(batch, rng)


def critic_target(r, d, s2, agent: SacAgent, rng: np.random.Generator):
    """Soft Bellman target for one or many transitions."""
    s2 = np.atleast_2d(np.asarray(s2, dtype=np.float64))
    y = agent.critic_target(np.atleast_1d(r), np.atleast_1d(d), s2,
                            rng.standard_normal((s2.shape[0], agent.action_dim)))
    return float(y[0]) if np.ndim(r) == 0 else y


def actor_sample(agent: SacAgent, s, rng: np.random.Generator, deterministic: bool = False):
    return agent.actor_sample(s, rng, deterministic)
