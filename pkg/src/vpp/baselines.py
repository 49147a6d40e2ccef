"""Independent-learner baseline: the same network with no message-passing rounds."""
from __future__ import annotations

import dataclasses

import numpy as np

from .policy import PolicyConfig, VPPPolicy


def independent_config(cfg: dict) -> dict:
    """Experiment config identical to ``cfg`` except ``policy.rounds = 0``."""
    out = dict(cfg)
    out["policy.rounds"] = 0
    return out


def independent_policy(config: PolicyConfig, rng: np.random.Generator) -> VPPPolicy:
    return VPPPolicy(dataclasses.replace(config, rounds=0), rng)


def config_diff(a: dict, b: dict) -> dict:
    """Keys whose values differ, mapped to (a_value, b_value)."""
    keys = set(a) | set(b)
    return {k: (a.get(k), b.get(k)) for k in sorted(keys) if a.get(k) != b.get(k)}
