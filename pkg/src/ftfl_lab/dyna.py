"""Dyna orchestration: model retrains, one-step rollouts and batch mixing."""

from __future__ import annotations

import logging
import math

import numpy as np

from .config import ExperimentConfig
from .dynamics import DynamicsEnsemble
from .envs import make_env
from .evaluation import MetricsWriter, RunRecord, critic_probe, format_value
from .replay import Batch, ReplayBuffer
from .sac import NonFiniteError, SacAgent

log = logging.getLogger(__name__)

_STREAMS = ("agent_init", "model_init", "env", "act", "update", "model_train", "rollout", "eval", "probe", "q_probe")


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per consumer so that, e.g., model training
    never perturbs the agent's random draws."""
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(_STREAMS, children)}


def generate_rollouts(model, agent: SacAgent, real: ReplayBuffer, synth: ReplayBuffer, n: int,
                      rng: np.random.Generator) -> int:
    """Branch ``n`` one-step synthetic transitions from stored real states."""
    if n <= 0:
        return 0
    if not getattr(model, "trained", True):
        log.warning("skipping rollouts: model has not been trained yet")
        return 0
    states = real.sample_batch(n, rng).states
    actions, _ = agent.actor_sample(states, rng)
    next_states, rewards = model.predict_batch(states, actions, rng, deterministic=False)
    synth.push_batch(Batch(states, actions, rewards, next_states, np.zeros(n)))
    return n


def mix_batch(real: ReplayBuffer, synth: ReplayBuffer | None, batch_size: int, ratio: float,
              rng: np.random.Generator) -> Batch:
    """``floor(ratio * B)`` synthetic rows plus real rows, shuffled together.

    Falls back to an all-real batch while the synthetic buffer is empty.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n_synth = math.floor(ratio * batch_size)
    if synth is None or len(synth) == 0:
        n_synth = 0
    if n_synth == 0:
        return real.sample_batch(batch_size, rng)
    if n_synth == batch_size:
        return synth.sample_batch(batch_size, rng)
    merged = Batch.concat([synth.sample_batch(n_synth, rng), real.sample_batch(batch_size - n_synth, rng)])
    return merged.take(rng.permutation(batch_size))


def evaluate(agent: SacAgent, env, episodes: int, rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """Mean deterministic return and every state visited."""
    returns, visited = [], []
    for _ in range(episodes):
        obs = env.reset(rng)
        total = 0.0
        while True:
            visited.append(obs)
            a, _ = agent.actor_sample(obs, rng, deterministic=True)
            res = env.step(a)
            total += res.reward
            obs = res.next_obs
            if res.terminal or res.truncated:
                break
        returns.append(total)
    return float(np.mean(returns)), np.array(visited)


def model_diagnostics(model: DynamicsEnsemble, real: ReplayBuffer, n: int, rng: np.random.Generator):
    """``(reward bias, reward rmse, variance diagnostic)`` on ``n`` real transitions."""
    batch = real.sample_batch(n, rng)
    _, r_hat = model.predict_batch(batch.states, batch.actions, rng, deterministic=True)
    err = r_hat - batch.rewards
    return float(err.mean()), float(np.sqrt(np.mean(err ** 2))), model.variance_diagnostic(batch)


def run_training(cfg: ExperimentConfig, csv_path=None) -> RunRecord:
    """One full online run; rows are written to ``csv_path`` as they appear."""
    record, _, _ = train_agent(cfg, csv_path)
    return record


def train_agent(cfg: ExperimentConfig, csv_path=None) -> tuple[RunRecord, SacAgent, ReplayBuffer]:
    """Like :func:`run_training` but also hands back the agent and real buffer."""
    rngs = make_streams(cfg.seed)
    env = make_env(cfg.env_name, **cfg.env_params)
    eval_env = make_env(cfg.env_name, **cfg.env_params)
    d_s, d_a = env.obs_dim, env.d_a
    sc = cfg.sac
    agent = SacAgent(d_s, d_a, sc, rngs["agent_init"])
    real = ReplayBuffer(min(sc.buffer_size, cfg.total_env_steps), d_s, d_a)
    model = synth = None
    if cfg.model_based:
        model = DynamicsEnsemble(d_s, d_a, cfg.ensemble, rngs["model_init"])
        synth = ReplayBuffer(cfg.synth_capacity, d_s, d_a)

    record = RunRecord(cfg.label, cfg.env_label, cfg.seed)
    writer = MetricsWriter(csv_path) if csv_path is not None else None
    critic_losses: list[float] = []
    last = {"alpha": agent.alpha}
    obs = env.reset(rngs["env"])
    try:
        for step in range(1, cfg.total_env_steps + 1):
            if step <= sc.warmup_steps:
                action = rngs["act"].uniform(-1.0, 1.0, size=d_a)
            else:
                action, _ = agent.actor_sample(obs, rngs["act"])
            res = env.step(action)
            real.push(obs, action, res.reward, res.next_obs, res.terminal)
            obs = env.reset(rngs["env"]) if (res.terminal or res.truncated) else res.next_obs

            if model is not None:
                if (step >= sc.warmup_steps and step % cfg.ensemble.retrain_interval == 0
                        and real.effective_size >= 2 * cfg.ensemble.batch_size):
                    report = model.train(real, rngs["model_train"])
                    log.debug("retrain at %d: elite mse %.4g, %d epochs", step, report.elite_mse, report.epochs)
                if model.trained:
                    generate_rollouts(model, agent, real, synth, cfg.rollouts_per_step, rngs["rollout"])

            if step > sc.warmup_steps and len(real) >= 1:
                for _ in range(sc.updates_per_step):
                    batch = mix_batch(real, synth, sc.batch_size, cfg.synthetic_ratio, rngs["update"])
                    m = agent.update(batch, rngs["update"])
                    critic_losses.append(m["critic_loss"])
                    last = m

            if step % cfg.eval_interval == 0:
                ret, visited = evaluate(agent, eval_env, cfg.eval_episodes, rngs["eval"])
                bias = var = float("nan")
                if model is not None and model.trained:
                    bias, _, var = model_diagnostics(model, real, cfg.probe_batch, rngs["probe"])
                row = {
                    "step": step,
                    "eval_return": ret,
                    "q_mean": critic_probe(agent, visited, rngs["q_probe"]),
                    "reward_bias": bias,
                    "variance_diag": var,
                    "alpha": last["alpha"],
                    "critic_loss": float(np.mean(critic_losses)) if critic_losses else float("nan"),
                }
                critic_losses = []
                checked = [row["eval_return"], row["q_mean"], row["alpha"]]
                if not np.isnan(row["critic_loss"]):
                    checked.append(row["critic_loss"])
                if not np.all(np.isfinite(checked)):
                    raise NonFiniteError(f"non-finite metrics at step {step}: {row}")
                record.append(row)
                if writer is not None:
                    writer.write(row)
    except FloatingPointError as exc:
        good = record.rows[-1] if record.rows else None
        raise NonFiniteError(f"{cfg.run_name()} aborted: {exc}; last good row: {good}") from exc
    finally:
        if writer is not None:
            writer.close()
    return record, agent, real


PROBE_COLUMNS = ("reveal_k", "reward_bias", "variance_diag", "holdout_mse", "reward_rmse")


def run_pseudo_online(cfg: ExperimentConfig, buffer_dump_path, reveal_step: int | None = None,
                      csv_path=None) -> list[dict]:
    """Retrain the ensemble on growing prefixes of a frozen buffer.

    No agent, no environment.  One row per reveal round; rounds whose prefix
    is too small to train on are logged with NaN diagnostics.
    """
    step = int(cfg.reveal_step if reveal_step is None else reveal_step)
    if step < 1:
        raise ValueError("reveal_step must be >= 1")
    buffer = ReplayBuffer.load(buffer_dump_path)
    rngs = make_streams(cfg.seed)
    model = DynamicsEnsemble(buffer.state_dim, buffer.action_dim, cfg.ensemble, rngs["model_init"])
    rows = []
    fh = open(csv_path, "w") if csv_path is not None else None
    try:
        if fh:
            fh.write(",".join(PROBE_COLUMNS) + "\n")
        for r in range(1, len(buffer) // step + 1):
            k = r * step
            buffer.reveal_prefix(k)
            row = {"reveal_k": k, "reward_bias": float("nan"), "variance_diag": float("nan"),
                   "holdout_mse": float("nan"), "reward_rmse": float("nan")}
            if k >= 2 * cfg.ensemble.batch_size:
                report = model.train(buffer, rngs["model_train"])
                bias, rmse, var = model_diagnostics(model, buffer, cfg.probe_batch, rngs["probe"])
                row.update(reward_bias=bias, variance_diag=var, holdout_mse=report.elite_mse, reward_rmse=rmse)
            rows.append(row)
            if fh:
                fh.write(",".join(format_value(row[c]) for c in PROBE_COLUMNS) + "\n")
                fh.flush()
    finally:
        if fh:
            fh.close()
    return rows
