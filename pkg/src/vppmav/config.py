"""YAML run configuration.

One file with a section per module (``dynamics``, ``actuator``, ``control``,
``env``, ``learner``, ``run``). Missing keys take the packaged defaults; the
resolved result is what every command writes beside its outputs.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import yaml

from .actuator import MotorModel, PropellerModel
from .control import ActionMapping, RatePdGains, SensorNoise
from .dynamics import BodyParams
from .env import SETUPS, TASKS, EnvConfig, RandomizationSpec
from .learner import PpoConfig


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def default_dict():
    text = resources.files("vppmav").joinpath("default_config.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text)


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in out:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(out[k], dict) and not isinstance(v, dict):
            raise ConfigError(f"{path + k!r} must be a mapping")
        out[k] = _merge(out[k], v, f"{path}{k}.") if isinstance(out[k], dict) else v
    return out


def read_file(path):
    """The raw mapping in a YAML file (no defaults applied)."""
    try:
        user = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return user


def load(path=None, overrides=None):
    """Defaults, then the file at ``path``, then ``overrides`` (nested dict)."""
    cfg = default_dict()
    if path is not None:
        cfg = _merge(cfg, read_file(path))
    if overrides:
        cfg = _merge(cfg, overrides)
    validate(cfg)
    return cfg


def _build(cls, section, name):
    try:
        known = {f.name for f in fields(cls)}
        extra = set(section) - known
        if extra:
            raise ConfigError(f"unknown keys in {name}: {sorted(extra)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
        return cls(**kw)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid {name}: {e}") from e


def validate(cfg):
    run = cfg["run"]
    if run["task"] not in TASKS:
        raise ConfigError(f"unknown task {run['task']!r}")
    if run["setup"] not in SETUPS:
        raise ConfigError(f"unknown setup {run['setup']!r}")
    if not isinstance(run["seed"], int):
        raise ConfigError("run.seed must be an integer")
    env_config(cfg)
    ppo_config(cfg)
    actuator_models(cfg)


def env_config(cfg) -> EnvConfig:
    c = cfg["control"]
    e = dict(cfg["env"])
    rnd = e.pop("randomization")
    poly = e.pop("disturbance_poly")
    try:
        return EnvConfig(
            task=cfg["run"]["task"], setup=cfg["run"]["setup"], num_envs=int(cfg["run"]["num_envs"]),
            deployment_mode=bool(cfg["run"]["deployment_mode"]),
            body=_build(BodyParams, cfg["dynamics"]["body"], "dynamics.body"),
            lag_time_constant=float(cfg["dynamics"]["lag_time_constant"]),
            mapping=_build(ActionMapping, c["action"], "control.action"),
            rate_gains=_build(RatePdGains, c["rate_pd"], "control.rate_pd"),
            sensor_noise=_build(SensorNoise, c["sensor_noise"], "control.sensor_noise"),
            randomization=_build(RandomizationSpec, rnd, "env.randomization"),
            disturbance_poly=tuple(poly),
            **e,
        )
    except TypeError as err:
        raise ConfigError(f"invalid env section: {err}") from err
    except ValueError as err:
        raise ConfigError(str(err)) from err


def ppo_config(cfg) -> PpoConfig:
    section = dict(cfg["learner"], num_envs=int(cfg["run"]["num_envs"]), epochs=int(cfg["run"]["epochs"]))
    return _build(PpoConfig, section, "learner")


def actuator_models(cfg):
    a = cfg["actuator"]
    return (_build(PropellerModel, a["propeller"], "actuator.propeller"),
            _build(MotorModel, a["motor"], "actuator.motor"))


def digest(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()


def dump(cfg, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")


@dataclass
class RunConfig:
    task: str
    setup: str
    seed: int
    num_envs: int
    epochs: int
    out_dir: str
    deployment_mode: bool = False

    @classmethod
    def from_dict(cls, cfg, out_dir):
        r = cfg["run"]
        return cls(r["task"], r["setup"], r["seed"], r["num_envs"], r["epochs"], str(out_dir), r["deployment_mode"])
