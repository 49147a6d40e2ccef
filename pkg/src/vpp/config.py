"""Flat dotted-key experiment configuration, validated against a schema."""
from __future__ import annotations

import hashlib
import inspect
import json
from pathlib import Path

from .envs import ENVIRONMENTS


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending key."""


_REQUIRED = object()

# key -> (accepted types, default)
SCHEMA: dict[str, tuple[tuple[type, ...], object]] = {
    "env.name": ((str,), _REQUIRED),
    "seed": ((int,), 0),
    "policy.variant": ((str,), "mean_field"),
    "policy.rounds": ((int,), 2),
    "policy.embed_dim": ((int,), 32),
    "policy.heads": ((int,), 2),
    "policy.hidden": ((int,), 128),
    "policy.head_type": ((str,), "discrete"),
    "policy.partial_observation": ((bool,), True),
    "policy.shared_weights": ((bool,), True),
    "critic.hidden": ((int,), 64),
    "train.total_steps": ((int,), _REQUIRED),
    "train.batch_size": ((int,), 1024),
    "train.buffer_capacity": ((int,), 1_000_000),
    "train.warmup_steps": ((int,), 1024),
    "train.gamma": ((float, int), 0.95),
    "train.tau": ((float, int), 0.01),
    "train.alpha": ((float, int), 0.2),
    "train.lr": ((float, int), 0.01),
    "train.optimizer": ((str,), "adam"),
    "train.gradient_steps": ((int,), 1),
    "train.env_steps_per_iteration": ((int,), 1),
    "train.pi_mode": ((str,), "auto"),
    "train.checkpoint_every": ((int,), 100),
    "train.target_reward": ((float, int, type(None)), None),
}

_CHOICES = {
    "policy.variant": ("mean_field", "loopy_bp"),
    "policy.head_type": ("discrete", "gaussian"),
    "train.optimizer": ("sgd", "adam"),
    "train.pi_mode": ("auto", "exact", "sampled"),
}

_POSITIVE = ("train.total_steps", "train.batch_size", "train.buffer_capacity",
             "train.gradient_steps", "train.env_steps_per_iteration", "train.checkpoint_every",
             "policy.embed_dim", "policy.heads", "policy.hidden", "critic.hidden")


def env_keys(name: str) -> dict[str, object]:
    """Accepted ``env.*`` keys for an environment with their constructor defaults."""
    sig = inspect.signature(ENVIRONMENTS[name].__init__)
    return {f"env.{p}": prm.default for p, prm in sig.parameters.items()
            if p not in ("self", "seed")}


def _type_ok(value, types) -> bool:
    if isinstance(value, bool) and bool not in types:
        return False
    return isinstance(value, types)


def validate(raw: dict) -> dict:
    """Apply defaults and check every key; returns the effective config."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    name = raw.get("env.name")
    if name is None:
        raise ConfigError("missing required key 'env.name'")
    if name not in ENVIRONMENTS:
        raise ConfigError(f"env.name: unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    allowed_env = env_keys(name)
    out: dict = {}
    for key, value in raw.items():
        if key in SCHEMA or key in allowed_env:
            continue
        raise ConfigError(f"unknown key {key!r}")
    for key, (types, default) in SCHEMA.items():
        if key in raw:
            value = raw[key]
            if not _type_ok(value, types):
                raise ConfigError(f"{key}: expected {'/'.join(t.__name__ for t in types)}, "
                                  f"got {type(value).__name__}")
            if float in types and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            out[key] = value
        elif default is _REQUIRED:
            raise ConfigError(f"missing required key {key!r}")
        else:
            out[key] = default
    for key, default in allowed_env.items():
        if key in raw:
            out[key] = raw[key]
        elif default is not inspect.Parameter.empty:
            out[key] = default
    for key, options in _CHOICES.items():
        if out[key] not in options:
            raise ConfigError(f"{key}: {out[key]!r} not in {options}")
    for key in _POSITIVE:
        if out[key] < 1:
            raise ConfigError(f"{key}: must be >= 1")
    if out["policy.rounds"] < 0:
        raise ConfigError("policy.rounds: must be >= 0")
    if out["policy.embed_dim"] % out["policy.heads"]:
        raise ConfigError("policy.embed_dim: must be divisible by policy.heads")
    if not 0.0 < out["train.gamma"] < 1.0:
        raise ConfigError("train.gamma: must lie in (0, 1)")
    if not 0.0 < out["train.tau"] <= 1.0:
        raise ConfigError("train.tau: must lie in (0, 1]")
    if out["train.alpha"] < 0 or out["train.lr"] <= 0:
        raise ConfigError("train.alpha must be >= 0 and train.lr > 0")
    if out["train.warmup_steps"] < 0:
        raise ConfigError("train.warmup_steps: must be >= 0")
    return out


def load(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from None
    return validate(raw)


def dump(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)


def env_kwargs(cfg: dict) -> dict:
    return {k[4:]: v for k, v in cfg.items() if k.startswith("env.") and k != "env.name"}


def sub_seed(seed: int, stream: str) -> int:
    """Independent 63-bit seed for a named random stream."""
    digest = hashlib.sha256(f"{int(seed)}/{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


STREAMS = ("env", "policy-init", "sampler", "buffer")
