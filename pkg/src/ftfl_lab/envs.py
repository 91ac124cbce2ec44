"""Desk-scale continuous-control environments.

Each environment is a small deterministic state machine: all randomness
lives in ``reset``; ``step`` is a pure function of (internal state, action).
Agents only ever see observations.  Rewards are computed on the post-step
state.  Episodes are fixed-horizon and never terminal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    name: str
    d_s: int
    d_a: int
    horizon: int = 200
    dt: float = 0.02
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class StepResult:
    next_obs: np.ndarray
    reward: float
    terminal: bool
    truncated: bool


def _coerce(default, value):
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.strip().lower() in ("1", "true", "yes", "on"):
                return True
            if value.strip().lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"cannot read {value!r} as a flag")
        return bool(value)
    return type(default)(value)


class Env:
    name = "base"
    defaults: dict = {}
    d_a = 1

    def __init__(self, **params):
        unknown = set(params) - set(self.defaults)
        if unknown:
            raise ValueError(f"unknown parameter(s) for env {self.name!r}: {sorted(unknown)}")
        self.params = {**self.defaults, **{k: _coerce(self.defaults[k], v) for k, v in params.items()}}
        self.dt = float(self.params.get("dt", 0.02))
        self.horizon = int(self.params.get("horizon", 200))
        self.state = None
        self.t = 0

    @property
    def spec(self) -> EnvSpec:
        return EnvSpec(self.name, self.obs_dim, self.d_a, self.horizon, self.dt, dict(self.params))

    @property
    def obs_dim(self) -> int:
        raise NotImplementedError

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def dynamics(self, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, float]:
        """Pure transition: ``(next internal state, reward)``."""
        raise NotImplementedError

    def observe(self, state: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state = self.initial_state(rng)
        self.t = 0
        return self.observe(self.state)

    def step(self, action) -> StepResult:
        if self.state is None:
            raise RuntimeError("step() before reset()")
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(self.d_a), -1.0, 1.0)
        self.state, reward = self.dynamics(self.state, a)
        self.t += 1
        return StepResult(self.observe(self.state), float(reward), False, self.t >= self.horizon)


class PendulumSwingup(Env):
    """Torque-limited pendulum; angle measured from upright, starts hanging."""

    name = "pendulum_swingup"
    defaults = {"g": 9.81, "l": 1.0, "m": 1.0, "u_max": 2.0, "damping": 0.1,
                "dt": 0.02, "horizon": 200}

    @property
    def obs_dim(self):
        return 3

    def initial_state(self, rng):
        return np.array([np.pi + rng.uniform(-0.1, 0.1), 0.0])

    def dynamics(self, state, action):
        p = self.params
        theta, omega = state
        acc = (p["g"] / p["l"]) * np.sin(theta) + action[0] * p["u_max"] / (p["m"] * p["l"] ** 2) \
            - p["damping"] * omega
        omega = omega + self.dt * acc
        theta = theta + self.dt * omega
        return np.array([theta, omega]), 0.5 * (1.0 + np.cos(theta))

    def observe(self, state):
        return np.array([np.cos(state[0]), np.sin(state[0]), state[1]])

    def energy(self, state) -> float:
        p = self.params
        return 0.5 * p["m"] * p["l"] ** 2 * state[1] ** 2 + p["m"] * p["g"] * p["l"] * np.cos(state[0])


def _rotation_contraction(rho: float, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return rho * np.array([[c, -s], [s, c]])


class ScaleMismatch(Env):
    """Linear system whose states live at scale ``S`` while reward is in (0, 1].

    ``x' = A x + B (a S) + bias S`` with ``A`` a rotation-contraction.
    """

    name = "scale_mismatch"
    defaults = {"S": 100.0, "rho": 0.95, "angle": 0.1, "gain": 0.3, "bias": -0.02,
                "dt": 0.02, "horizon": 200}
    d_a = 2

    def __init__(self, **params):
        super().__init__(**params)
        p = self.params
        self.A = _rotation_contraction(p["rho"], p["angle"])
        self.B = p["gain"] * np.eye(2)
        self.bias = np.array([p["bias"], 0.0])

    @property
    def obs_dim(self):
        return 2

    def initial_state(self, rng):
        return rng.uniform(-0.01, 0.01, size=2) * self.params["S"]

    def dynamics(self, state, action):
        S = self.params["S"]
        x = self.A @ state + self.B @ (action * S) + self.bias * S
        return x, float(np.exp(-((x[0] / S - 1.0) ** 2) / 0.25))

    def observe(self, state):
        return state.copy()


class ContactHopperLite(Env):
    """Vertical thruster over a stiff penalty-spring ground.

    Observation ``(h, v, c)`` where ``c = k max(0, -h)`` is the contact force,
    or ``(h, v)`` with ``include_contact=False``.
    """

    name = "contact_hopper_lite"
    defaults = {"g": 9.81, "u_max": 20.0, "k": 1000.0, "ground_damping": 30.0,
                "h_target": 1.0, "include_contact": True, "dt": 0.02, "horizon": 200}

    @property
    def obs_dim(self):
        return 3 if self.params["include_contact"] else 2

    def initial_state(self, rng):
        return np.array([self.params["h_target"] + rng.uniform(-0.05, 0.05), 0.0])

    def contact_force(self, h: float) -> float:
        return self.params["k"] * max(0.0, -h)

    def dynamics(self, state, action):
        p = self.params
        h, v = state
        force = action[0] * p["u_max"] - p["g"]
        if h < 0.0:
            force += self.contact_force(h) - p["ground_damping"] * v
        v = v + self.dt * force
        h = h + self.dt * v
        return np.array([h, v]), float(np.exp(-((h - p["h_target"]) ** 2) / 0.1))

    def observe(self, state):
        h, v = state
        if self.params["include_contact"]:
            return np.array([h, v, self.contact_force(h)])
        return np.array([h, v])


class GymLikeRunner(Env):
    """1-D runner with quadratic drag and unbounded velocity reward."""

    name = "gym_like_runner"
    defaults = {"u_max": 5.0, "drag": 0.5, "omega": 1.0, "ctrl_cost": 0.1,
                "dt": 0.02, "horizon": 200}

    @property
    def obs_dim(self):
        return 3

    def initial_state(self, rng):
        return np.array([rng.uniform(-0.1, 0.1), 0.0])

    def dynamics(self, state, action):
        p = self.params
        x, v = state
        a = action[0]
        v = v + self.dt * (a * p["u_max"] - p["drag"] * v * abs(v))
        x = x + self.dt * v
        return np.array([x, v]), float(v - p["ctrl_cost"] * a * a)

    def observe(self, state):
        x, v = state
        w = self.params["omega"]
        return np.array([v, np.sin(w * x), np.cos(w * x)])


class StaticEnv(Env):
    """Nothing moves: ``s' = s``; reward depends on the (random) start state only."""

    name = "static"
    defaults = {"dt": 0.02, "horizon": 200}

    @property
    def obs_dim(self):
        return 2

    def initial_state(self, rng):
        return rng.uniform(-1.0, 1.0, size=2)

    def dynamics(self, state, action):
        return state.copy(), float(np.exp(-state @ state))

    def observe(self, state):
        return state.copy()


ENVS = {cls.name: cls for cls in (PendulumSwingup, ScaleMismatch, ContactHopperLite,
                                  GymLikeRunner, StaticEnv)}

# reward is guaranteed inside [0, 1] for these
BOUNDED_REWARD_ENVS = ("pendulum_swingup", "scale_mismatch", "contact_hopper_lite", "static")


def make_env(name: str, **params) -> Env:
    try:
        cls = ENVS[name]
    except KeyError:
        raise ValueError(f"unknown env {name!r}; choose from {sorted(ENVS)}") from None
    return cls(**params)
