"""Experiment configuration files.

A config is a YAML mapping with a ``version`` field.  Keys not listed in
:data:`DEFAULTS` are rejected; :data:`REQUIRED` keys must be present.
Dotted overrides such as ``train.lr=4e-4`` are applied on top, their
values parsed as YAML scalars.  The resolved config (every key filled
in) is what gets frozen next to the results.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .alloop import STRATEGIES, DataSpec, ExperimentConfig, Strategy
from .data import PhantomConfig
from .model import TrainConfig

SCHEMA_VERSION = 1

DEFAULTS: dict = {
    "version": SCHEMA_VERSION,
    "data": {
        "manifest": None,
        "seed": 7,
        "volumes": 30,
        "height": 64,
        "width": 64,
        "depth": 16,
        "classes": 4,
        "noise": PhantomConfig.noise,
        "minority_fraction": PhantomConfig.minority_fraction,
    },
    "splits": [1, 24, 1, 4],
    "experiment": {
        "rule": "volume",
        "budget": 1,
        "iterations": 6,
        "strategies": list(STRATEGIES),
        "seeds": [0, 1, 2],
        "upper_bound": True,
        "record_wall_time": False,
    },
    "strategy": {"lam": None, "candidate_factor": 2.0, "bins": 32},
    "train": TrainConfig().to_dict(),
}

REQUIRED = ("version", "experiment.rule", "experiment.budget", "experiment.iterations")


class ConfigError(ValueError):
    pass


def _get(d: dict, dotted: str):
    cur = d
    for part in dotted.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise KeyError(dotted)
        cur = cur[part]
    return cur


def _coerce(default, value, path: str):
    # YAML 1.1 reads "1e-3" as a string; numeric keys take their default's type
    if isinstance(default, bool) or value is None or not isinstance(default, (int, float)):
        return value
    if isinstance(value, str):
        try:
            value = float(value)
        except ValueError:
            raise ConfigError(f"config key {path} must be a number, got {value!r}") from None
    if isinstance(default, int) and isinstance(value, float):
        if not value.is_integer():
            raise ConfigError(f"config key {path} must be an integer, got {value!r}")
        return int(value)
    return value


def _merge(base: dict, user: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in user.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path} must be a mapping")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = _coerce(base[key], value, path)
    return out


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        node, base = cfg, DEFAULTS
        for part in parts[:-1]:
            if part not in base or not isinstance(base[part], dict):
                raise ConfigError(f"unknown config key: {dotted}")
            node, base = node.setdefault(part, {}), base[part]
        if parts[-1] not in base or isinstance(base[parts[-1]], dict):
            raise ConfigError(f"unknown config key: {dotted}")
        node[parts[-1]] = yaml.safe_load(raw)
    return cfg


def resolve(user: dict, overrides=()) -> dict:
    """Validate a user mapping and fill in defaults."""
    if not isinstance(user, dict):
        raise ConfigError("config must be a mapping")
    user = apply_overrides(user, overrides)
    for dotted in REQUIRED:
        try:
            _get(user, dotted)
        except KeyError:
            raise ConfigError(f"missing required config key: {dotted}") from None
    if user["version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config version {user['version']!r} (expected {SCHEMA_VERSION})")
    resolved = _merge(DEFAULTS, user)
    build(resolved)  # type and range checks
    return resolved


def load(path, overrides=()) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        user = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return resolve(user, overrides)


def dump(resolved: dict) -> str:
    return yaml.safe_dump(resolved, sort_keys=False)


def build(resolved: dict) -> tuple[list[ExperimentConfig], list[int], bool]:
    """Experiment configs (one per strategy), seeds, and the upper-bound flag."""
    try:
        d, e, s = resolved["data"], resolved["experiment"], resolved["strategy"]
        phantom = PhantomConfig(
            n_volumes=int(d["volumes"]),
            height=int(d["height"]),
            width=int(d["width"]),
            depth=int(d["depth"]),
            n_classes=int(d["classes"]),
            noise=float(d["noise"]),
            minority_fraction=float(d["minority_fraction"]),
        )
        data = DataSpec(manifest=d["manifest"], seed=int(d["seed"]), phantom=phantom)
        train = TrainConfig(**resolved["train"])
        strategies = e["strategies"]
        if isinstance(strategies, str):
            strategies = [strategies]
        seeds = e["seeds"]
        if isinstance(seeds, int):
            seeds = [seeds]
        if not strategies or not seeds:
            raise ConfigError("experiment.strategies and experiment.seeds must be non-empty")
        splits = tuple(int(x) for x in resolved["splits"])
        if len(splits) != 4:
            raise ConfigError("splits must list four counts")
        if data.manifest is None and sum(splits) != phantom.n_volumes:
            raise ConfigError(f"splits {splits} do not sum to data.volumes={phantom.n_volumes}")
        cfgs = [
            ExperimentConfig(
                data=data,
                splits=splits,
                rule=str(e["rule"]),
                budget=int(e["budget"]),
                iterations=int(e["iterations"]),
                strategy=Strategy(
                    name, None if s["lam"] is None else float(s["lam"]), float(s["candidate_factor"]), int(s["bins"])
                ),
                train=train,
                seed=int(seeds[0]),
                record_wall_time=bool(e["record_wall_time"]),
            )
            for name in strategies
        ]
        return cfgs, [int(x) for x in seeds], bool(e["upper_bound"])
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
