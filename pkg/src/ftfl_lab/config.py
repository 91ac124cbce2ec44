"""Experiment configuration and its INI file format.

Sections map onto the owning components::

    [dyna]      algo, total_env_steps, synthetic_ratio, rollouts_per_step, ...
    [sac]       SacConfig fields
    [ensemble]  EnsembleConfig fields
    [env]       name plus that environment's own parameters
    [eval]      eval_interval, eval_episodes, final_window, probe_batch

Command-line ``section.key=value`` overrides win over the file.  Unknown
keys, unparseable values and invariant violations raise :class:`ConfigError`.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .dynamics import EnsembleConfig
from .envs import ENVS
from .sac import SacConfig

ALGOS = ("sac", "mbpo", "ftfl", "ablation")

# (target_mode, target_norm) -> ablation cell label
CELLS = {
    ("residual", False): "res",
    ("residual", True): "res+norm",
    ("direct", False): "dir",
    ("direct", True): "dir+norm",
}
PINNED = {"mbpo": ("residual", False), "ftfl": ("direct", True)}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    algo: str = "mbpo"
    env_name: str = "scale_mismatch"
    env_params: dict = field(default_factory=dict)
    total_env_steps: int = 20_000
    seed: int = 0
    sac: SacConfig = field(default_factory=SacConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    synthetic_ratio: float = 0.95
    rollouts_per_step: int = 400
    model_horizon: int = 1
    synth_capacity: int = 400_000
    reveal_step: int = 250
    eval_interval: int = 500
    eval_episodes: int = 5
    final_window: int = 10
    probe_batch: int = 256

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"dyna.algo must be one of {ALGOS}, got {self.algo!r}")
        if self.env_name not in ENVS:
            raise ConfigError(f"env.name must be one of {sorted(ENVS)}, got {self.env_name!r}")
        if not 0.0 <= self.synthetic_ratio <= 1.0:
            raise ConfigError("dyna.synthetic_ratio must lie in [0, 1]")
        if self.model_horizon != 1:
            raise ConfigError("dyna.model_horizon: only one-step rollouts are supported")
        if self.algo in PINNED:
            mode, norm = PINNED[self.algo]
            if (self.ensemble.target_mode, self.ensemble.target_norm) != (mode, norm):
                raise ConfigError(f"algo={self.algo} requires ensemble.target_mode={mode} "
                                  f"and ensemble.target_norm={str(norm).lower()}")
        for name in ("total_env_steps", "eval_interval", "eval_episodes", "final_window",
                     "probe_batch", "reveal_step", "synth_capacity"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.rollouts_per_step < 0:
            raise ConfigError("dyna.rollouts_per_step must be >= 0")

    @property
    def model_based(self) -> bool:
        return self.algo != "sac"

    @property
    def label(self) -> str:
        if self.algo == "ablation":
            return CELLS[(self.ensemble.target_mode, self.ensemble.target_norm)]
        return self.algo

    @property
    def env_label(self) -> str:
        """Env name, tagged when the hopper's contact channel is switched off."""
        if self.env_params.get("include_contact") is False:
            return f"{self.env_name}-nocontact"
        return self.env_name

    def run_name(self) -> str:
        return f"{self.label}_{self.env_label}_s{self.seed}"


# -- parsing -----------------------------------------------------------------

_SECTIONS = {
    "sac": SacConfig,
    "ensemble": EnsembleConfig,
}
_DYNA_KEYS = ("algo", "total_env_steps", "synthetic_ratio", "rollouts_per_step", "model_horizon",
              "synth_capacity", "reveal_step")
_EVAL_KEYS = ("eval_interval", "eval_episodes", "final_window", "probe_batch")


def _parse_bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        return _parse_bool(raw)
    if isinstance(default, int):
        return int(raw.replace("_", ""))
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(p) for p in raw.replace(",", " ").split())
    return raw


def _field_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def _collect(path, overrides) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        text = p.read_text()
        try:
            parser.read_string(text, source=str(p))
        except configparser.MissingSectionHeaderError:
            if text.strip():
                raise ConfigError(f"{p}: keys must live inside a [section]") from None
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
    sections: dict[str, dict[str, str]] = {s: dict(parser[s]) for s in parser.sections()}
    for item in overrides or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        sections.setdefault(section, {})[name] = value
    return sections


def parse_config(path=None, overrides=(), seed: int = 0) -> ExperimentConfig:
    """Read an INI config (may be empty or ``None``) and apply overrides."""
    sections = _collect(path, overrides)
    unknown = set(sections) - {"sac", "ensemble", "dyna", "env", "eval"}
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")

    def build(section: str, cls, keys=None):
        defaults = _field_defaults(cls)
        allowed = keys if keys is not None else tuple(defaults)
        values = {}
        for key, raw in sections.get(section, {}).items():
            if key not in allowed:
                raise ConfigError(f"unknown key {section}.{key}")
            default = defaults[key]
            if default is None:  # optional float
                default = 0.0
            try:
                values[key] = None if raw.strip().lower() == "none" else _parse_value(raw, default)
            except ValueError:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from None
        return values

    sac_vals = build("sac", SacConfig)
    ens_vals = build("ensemble", EnsembleConfig)
    top = _field_defaults(ExperimentConfig)
    dyna_vals = build("dyna", ExperimentConfig, _DYNA_KEYS)
    eval_vals = build("eval", ExperimentConfig, _EVAL_KEYS)

    env_section = dict(sections.get("env", {}))
    env_name = env_section.pop("name", top["env_name"]).strip()
    if env_name not in ENVS:
        raise ConfigError(f"bad value for env.name: {env_name!r}")
    env_defaults = ENVS[env_name].defaults
    env_params = {}
    for key, raw in env_section.items():
        if key not in env_defaults:
            raise ConfigError(f"unknown key env.{key} for env {env_name}")
        try:
            env_params[key] = _parse_value(raw, env_defaults[key])
        except ValueError:
            raise ConfigError(f"bad value for env.{key}: {raw!r}") from None

    algo = dyna_vals.get("algo", top["algo"])
    if algo in PINNED:
        mode, norm = PINNED[algo]
        ens_vals.setdefault("target_mode", mode)
        ens_vals.setdefault("target_norm", norm)
    # MBPO-family critics get layer norm unless told otherwise
    sac_vals.setdefault("critic_layer_norm", algo != "sac")

    try:
        sac = SacConfig(**sac_vals)
        ens = EnsembleConfig(**ens_vals)
        return ExperimentConfig(env_name=env_name, env_params=env_params, seed=seed, sac=sac, ensemble=ens,
                                **dyna_vals, **eval_vals)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def render_config(cfg: ExperimentConfig) -> str:
    """Fully resolved INI text; parsing it back reproduces ``cfg``."""
    def fmt(v):
        if isinstance(v, bool):
            return str(v).lower()
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        if v is None:
            return "none"
        return repr(v) if isinstance(v, float) else str(v)

    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["dyna"] = {k: fmt(getattr(cfg, k)) for k in _DYNA_KEYS}
    parser["sac"] = {f.name: fmt(getattr(cfg.sac, f.name)) for f in dataclasses.fields(SacConfig)}
    parser["ensemble"] = {f.name: fmt(getattr(cfg.ensemble, f.name)) for f in dataclasses.fields(EnsembleConfig)}
    parser["env"] = {"name": cfg.env_name, **{k: fmt(v) for k, v in cfg.env_params.items()}}
    parser["eval"] = {k: fmt(getattr(cfg, k)) for k in _EVAL_KEYS}
    buf = io.StringIO()
    buf.write(f"# seed = {cfg.seed}\n")
    parser.write(buf)
    return buf.getvalue()


def with_cell(cfg: ExperimentConfig, target_mode: str, target_norm: bool) -> ExperimentConfig:
    """Copy of ``cfg`` as an ablation cell."""
    ens = dataclasses.replace(cfg.ensemble, target_mode=target_mode, target_norm=target_norm)
    return dataclasses.replace(cfg, algo="ablation", ensemble=ens)


def with_algo(cfg: ExperimentConfig, algo: str) -> ExperimentConfig:
    ens = cfg.ensemble
    if algo in PINNED:
        mode, norm = PINNED[algo]
        ens = dataclasses.replace(ens, target_mode=mode, target_norm=norm)
    return dataclasses.replace(cfg, algo=algo, ensemble=ens)
