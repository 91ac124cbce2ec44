import numpy as np
import pytest
from conftest import probe_rel_err
from scipy.integrate import quad
from scipy.stats import norm

from ftfl_lab.evaluation import critic_probe
from ftfl_lab.replay import Batch
from ftfl_lab.sac import NonFiniteError, SacAgent, SacConfig, critic_target, polyak, squash_log_prob


def small_agent(d_s=3, d_a=2, seed=0, **kw):
    base = dict(hidden_dims=(8, 8), batch_size=16)
    base.update(kw)
    return SacAgent(d_s, d_a, SacConfig(**base), np.random.default_rng(seed))


def random_batch(n, d_s, d_a, rng):
    return Batch(rng.normal(size=(n, d_s)), rng.uniform(-0.9, 0.9, size=(n, d_a)), rng.uniform(0, 1, size=n),
                 rng.normal(size=(n, d_s)), (rng.uniform(size=n) < 0.2).astype(float))


def hand_mlp(params, x):
    """Relu MLP written out layer by layer, no stacking, no norm."""
    h = x
    n = len(params) // 2
    for i in range(n):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n - 1:
            h = np.maximum(h, 0.0)
    return h


# -- policy --------------------------------------------------------------------

def test_actions_strictly_inside_box():
    agent = small_agent(seed=1)
    agent.actor.params[-1][2:] = 2.0  # wide policy: log_std at the upper clip
    a, logp = agent.actor_sample(np.zeros((100_000, 3)), np.random.default_rng(0))
    assert np.all(np.abs(a) < 1.0) and np.all(np.isfinite(logp))


def test_deterministic_action_is_tanh_mu():
    agent = small_agent()
    s = np.random.default_rng(2).normal(size=3)
    a, logp = agent.actor_sample(s, np.random.default_rng(0), deterministic=True)
    mu = hand_mlp(agent.actor.params, s)[:2]
    assert logp is None and np.array_equal(a, np.tanh(mu))  # |mu| is small here


@pytest.mark.parametrize("mu,log_std", [(0.0, 0.0), (1.3, -1.0), (-0.4, 1.5), (2.5, -3.0)])
def test_squashed_density_integrates_to_one(mu, log_std):
    def density(a):
        u = np.arctanh(a)
        noise = (u - mu) / np.exp(log_std)
        return np.exp(squash_log_prob(np.array([u]), np.array([noise]), np.array([log_std])))

    # wide policies pile mass against +-1: refine toward the edges, and take the
    # last sliver beyond 1 - 1e-10 from the Gaussian tail in u
    near = 1.0 - 10.0 ** -np.arange(1, 11)
    edges = np.unique(np.r_[-near, np.tanh(mu), near])
    total = sum(quad(density, lo, hi, limit=400)[0] for lo, hi in zip(edges[:-1], edges[1:]))
    u_edge = np.arctanh(near[-1])
    std = np.exp(log_std)
    total += norm.sf((u_edge - mu) / std) + norm.cdf((-u_edge - mu) / std)
    assert total == pytest.approx(1.0, abs=1e-3)


def test_actor_density_integrates_to_one():
    agent = small_agent(d_s=2, d_a=1, seed=3)
    s = np.array([0.5, -0.2])
    out = hand_mlp(agent.actor.params, s)
    mu, log_std = out[0], np.clip(out[1], -5, 2)

    def density(a):
        u = np.arctanh(a)
        return np.exp(squash_log_prob(np.array([u]), np.array([(u - mu) / np.exp(log_std)]), np.array([log_std])))

    total, _ = quad(density, -1.0, 1.0, limit=400)
    assert total == pytest.approx(1.0, abs=1e-3)


def test_log_prob_stable_at_saturation():
    u = np.array([[30.0, -30.0]])
    lp = squash_log_prob(u, np.zeros((1, 2)), np.zeros((1, 2)))
    assert np.isfinite(lp).all()
    # log(1 - tanh(u)^2) -> log 4 - 2|u| for large |u|
    expected = 2 * (-0.5 * np.log(2 * np.pi)) - 2 * (np.log(4.0) - 60.0)
    assert lp[0] == pytest.approx(expected, rel=1e-12)


# -- critic target -------------------------------------------------------------

def test_critic_target_terminal_and_zero_discount():
    agent = small_agent()
    s2 = np.ones(3)
    assert critic_target(0.7, 1.0, s2, agent, np.random.default_rng(0)) == 0.7
    flat = small_agent(gamma=1e-300)
    assert critic_target(0.7, 0.0, s2, flat, np.random.default_rng(0)) == pytest.approx(0.7, abs=1e-12)


def test_critic_target_hand_evaluation():
    agent = small_agent(d_s=2, d_a=1, seed=5, init_alpha=0.3)
    s2 = np.array([0.4, -1.1])
    r, g = 0.25, agent.config.gamma
    noise = np.random.default_rng(7).standard_normal(1)[0]

    out = hand_mlp(agent.actor.params, s2)
    mu, log_std = out[0], float(np.clip(out[1], -5.0, 2.0))
    u = mu + np.exp(log_std) * noise
    a = np.tanh(u)
    logp = -0.5 * noise ** 2 - log_std - 0.5 * np.log(2 * np.pi) - np.log(1.0 - a * a)
    q = [hand_mlp([p[k] for p in agent.target_params], np.r_[s2, a])[0] for k in range(2)]
    expected = r + g * (min(q) - 0.3 * logp)

    y = critic_target(r, 0.0, s2, agent, np.random.default_rng(7))
    assert y == pytest.approx(expected, abs=1e-10)


# -- polyak ----------------------------------------------------------------------

def test_polyak_examples():
    t, o = [np.ones(3)], [np.zeros(3)]
    assert np.array_equal(polyak([t[0].copy()], o, 1.0)[0], np.ones(3))
    assert np.array_equal(polyak([t[0].copy()], o, 0.0)[0], np.zeros(3))
    assert np.allclose(polyak([t[0].copy()], o, 0.995)[0], 0.995)
    with pytest.raises(ValueError):
        polyak([np.ones(3)], [np.ones(4)], 0.5)


def test_polyak_lag_contracts():
    rng = np.random.default_rng(0)
    target, online = [rng.normal(size=(4, 4))], [rng.normal(size=(4, 4))]
    gap = np.linalg.norm(target[0] - online[0])
    for _ in range(20):
        polyak(target, online, 0.995)
        new = np.linalg.norm(target[0] - online[0])
        assert new <= 0.995 * gap + 1e-12
        gap = new


def test_targets_start_as_copies():
    agent = small_agent(critic_layer_norm=True)
    assert all(np.array_equal(t, p) for t, p in zip(agent.target_params, agent.critic.params))
    assert all(t is not p for t, p in zip(agent.target_params, agent.critic.params))


# -- gradients -----------------------------------------------------------------

@pytest.mark.parametrize("layer_norm", [False, True])
def test_critic_gradient_fifty_probes(layer_norm):
    rng = np.random.default_rng(10)
    agent = small_agent(critic_layer_norm=layer_norm, seed=11)
    b = random_batch(12, 3, 2, rng)
    y = rng.normal(size=12)
    _, grads = agent.critic_loss_and_grads(b.states, b.actions, y)
    err = probe_rel_err(lambda: agent.critic_loss_and_grads(b.states, b.actions, y)[0],
                        agent.critic.params, grads, rng)
    assert err <= 1e-4


@pytest.mark.parametrize("layer_norm", [False, True])
def test_actor_gradient_fifty_probes(layer_norm):
    rng = np.random.default_rng(20)
    agent = small_agent(critic_layer_norm=layer_norm, seed=21, init_alpha=0.7)
    s = rng.normal(size=(12, 3))
    noise = rng.normal(size=(12, 2))
    _, grads, _ = agent.actor_loss_and_grads(s, noise)
    err = probe_rel_err(lambda: agent.actor_loss_and_grads(s, noise)[0], agent.actor.params, grads, rng)
    assert err <= 1e-4


def test_actor_gradient_through_log_std_clip():
    rng = np.random.default_rng(30)
    agent = small_agent(seed=31)
    agent.actor.params[-1][2] = 9.0  # first log_std well above the clip
    s = rng.normal(size=(6, 3))
    noise = rng.normal(size=(6, 2))
    _, grads, _ = agent.actor_loss_and_grads(s, noise)
    err = probe_rel_err(lambda: agent.actor_loss_and_grads(s, noise)[0], agent.actor.params, grads, rng)
    assert err <= 1e-4


def test_alpha_gradient_matches_difference():
    agent = small_agent(init_alpha=0.4)
    logp = np.random.default_rng(0).normal(size=32)
    _, g = agent.alpha_loss_and_grad(logp)
    eps = 1e-6
    base = agent.log_alpha[0]
    agent.log_alpha[0] = base + eps
    hi = agent.alpha_loss_and_grad(logp)[0]
    agent.log_alpha[0] = base - eps
    lo = agent.alpha_loss_and_grad(logp)[0]
    agent.log_alpha[0] = base
    assert g[0] == pytest.approx((hi - lo) / (2 * eps), rel=1e-6)


def test_alpha_rises_when_entropy_below_target():
    agent = small_agent()
    # entropy = -mean(logp) = -5 < target -2
    _, g = agent.alpha_loss_and_grad(np.full(16, 5.0))
    assert g[0] < 0  # descent raises log alpha
    _, g = agent.alpha_loss_and_grad(np.full(16, -5.0))
    assert g[0] > 0


# -- updates -------------------------------------------------------------------

def test_critic_loss_decreases_on_fixed_batch():
    rng = np.random.default_rng(0)
    agent = small_agent(hidden_dims=(32, 32), seed=1)
    b = random_batch(64, 3, 2, rng)
    losses = [agent.update(b, rng)["critic_loss"] for _ in range(100)]
    slope = np.polyfit(np.arange(100), losses, 1)[0]
    assert slope < 0 and np.mean(losses[-10:]) < np.mean(losses[:10])


def test_update_metrics_and_alpha_positive():
    rng = np.random.default_rng(0)
    agent = small_agent()
    for _ in range(30):
        m = agent.update(random_batch(16, 3, 2, rng), rng)
        assert set(m) >= {"critic_loss", "actor_loss", "alpha", "q_mean"}
        assert np.isfinite(m["q_mean"]) and m["alpha"] > 0
    with pytest.raises(ValueError):
        agent.update(random_batch(0, 3, 2, rng), rng)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_batch_aborts():
    rng = np.random.default_rng(0)
    agent = small_agent()
    b = random_batch(8, 3, 2, rng)
    b.rewards[3] = np.inf
    with pytest.raises(NonFiniteError):
        agent.update(b, rng)


def test_identical_seeds_identical_updates():
    runs = []
    for _ in range(2):
        rng = np.random.default_rng(4)
        agent = small_agent(seed=8)
        runs.append([agent.update(random_batch(16, 3, 2, rng), rng)["critic_loss"] for _ in range(5)])
    assert runs[0] == runs[1]


def test_critic_probe_fresh_and_deterministic():
    agent = small_agent()
    v = critic_probe(agent, np.zeros((5, 3)), np.random.default_rng(0))
    assert np.isfinite(v)
    assert v == critic_probe(agent, np.zeros((5, 3)), np.random.default_rng(0))
    with pytest.raises(ValueError):
        critic_probe(agent, np.zeros((0, 3)), np.random.default_rng(0))


def test_config_validation():
    for bad in (dict(gamma=1.0), dict(tau=1.5), dict(init_alpha=0.0)):
        with pytest.raises(ValueError):
            SacConfig(**bad)
