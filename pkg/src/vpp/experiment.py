"""Build environments, policies and trainers from a validated config; persist run outputs."""
from __future__ import annotations

import csv
import itertools
import json
import math
from pathlib import Path

import numpy as np

from . import report
from .autodiff import load_checkpoint, restore
from .config import ConfigError, dump, env_kwargs, sub_seed, validate
from .envs import make_env
from .policy import PolicyConfig, VPPPolicy
from .sac import METRIC_COLUMNS, CriticSet, Trainer, TrainSettings, evaluate

FINAL_WINDOW = 100


def build(cfg: dict, seed: int):
    """Environment, policy, critics and settings for one (config, seed) cell."""
    env = make_env(cfg["env.name"], **env_kwargs(cfg), seed=sub_seed(seed, "env"))
    if cfg["policy.head_type"] != "discrete":
        raise ConfigError("policy.head_type: every bundled environment has discrete actions")
    pcfg = PolicyConfig(
        obs_dim=env.obs_dim, n_actions=env.n_actions, n_agents=env.n_agents,
        variant=cfg["policy.variant"], rounds=cfg["policy.rounds"], embed_dim=cfg["policy.embed_dim"],
        heads=cfg["policy.heads"], hidden=cfg["policy.hidden"], head_type=cfg["policy.head_type"],
        partial_observation=cfg["policy.partial_observation"],
        shared_weights=cfg["policy.shared_weights"])
    init = np.random.default_rng(sub_seed(seed, "policy-init"))
    policy = VPPPolicy(pcfg, init)
    critics = CriticSet(env.n_agents, policy.config.obs_dim, env.n_actions, init,
                        hidden=cfg["critic.hidden"], gamma=cfg["train.gamma"], tau=cfg["train.tau"],
                        alpha=cfg["train.alpha"], action_kind=cfg["policy.head_type"])
    return env, policy, critics, TrainSettings.from_config(cfg)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def summarize(rows: list[dict], window: int = FINAL_WINDOW) -> dict:
    rew = np.array([r["mean_group_reward"] for r in rows], dtype=np.float64)
    tail = rew[-window:]
    trailing = report.rolling_mean(rew, 20) if rew.size else rew
    return {
        "episodes": len(rows),
        "steps": rows[-1]["step"] if rows else 0,
        "final_window": int(tail.size),
        "final_mean": float(tail.mean()) if tail.size else None,
        "final_std": float(tail.std()) if tail.size else None,
        "best_trailing20": float(trailing[19:].max()) if rew.size >= 20 else None,
    }


def run_training(cfg: dict, seed: int, out_dir, figures: bool = True, progress=None) -> dict:
    """Train one cell, writing config.json, metrics.csv, checkpoints, summary.json and a figure."""
    cfg = validate(dict(cfg, seed=seed))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dump(cfg) + "\n")
    env, policy, critics, settings = build(cfg, seed)
    trainer = Trainer(env, policy, critics, settings, seed=seed, checkpoint_dir=out / "checkpoints")
    rows = []
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        try:
            for row in trainer.run():
                rows.append(row)
                writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
                if progress is not None:
                    progress(row)
        finally:
            fh.flush()
    trainer.checkpoint(out / "checkpoints" / "final")
    summary = dict(summarize(rows), seed=seed, env=cfg["env.name"], rounds=cfg["policy.rounds"],
                   updates=trainer.updates)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if figures and rows:
        report.learning_curves({f"M={cfg['policy.rounds']}": rows}, out / "learning_curve.png",
                               title=f"{cfg['env.name']} seed {seed}")
    return summary


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for k, v in rec.items():
                if k in ("step", "episode"):
                    row[k] = int(v)
                else:
                    row[k] = float(v) if v != "" else math.nan
            rows.append(row)
    return rows


def load_policy(cfg: dict, checkpoint_dir, seed: int = 0):
    """Rebuild the configured policy and load ``policy`` weights from a checkpoint directory."""
    env, policy, _, _ = build(cfg, seed)
    restore(policy.store, load_checkpoint(Path(checkpoint_dir) / "policy"))
    return env, policy


def run_eval(cfg: dict, checkpoint_dir, episodes: int, seed: int = 0, greedy: bool = False) -> dict:
    if episodes < 1:
        raise ConfigError("--episodes must be >= 1")
    env, policy = load_policy(cfg, checkpoint_dir, seed)
    rng = np.random.default_rng(sub_seed(seed, "sampler"))
    rew = evaluate(env, policy, episodes, rng, greedy=greedy)
    return {"episodes": episodes, "mean": float(rew.mean()), "std": float(rew.std()),
            "greedy": greedy}


def expand_sweep(sweep: dict) -> list[dict]:
    """Cartesian product of per-key value lists; an empty sweep yields one empty override."""
    keys = sorted(sweep)
    for k in keys:
        if not isinstance(sweep[k], list) or not sweep[k]:
            raise ConfigError(f"sweep {k!r}: expected a non-empty list of values")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(sweep[k] for k in keys))]


def _cell_label(override: dict) -> str:
    return ",".join(f"{k}={v}" for k, v in override.items()) or "base"


def run_ablation(base: dict, sweep: dict, seeds: list[int], out_dir, figures: bool = True) -> list[dict]:
    cells = expand_sweep(sweep)
    for key in sweep:
        if key not in validate(dict(base)) and not key.startswith("env."):
            raise ConfigError(f"unknown sweep key {key!r}")
    for override in cells:
        try:
            validate(dict(base, **override))
        except ConfigError as err:
            raise ConfigError(f"sweep cell {_cell_label(override)}: {err}") from None
    out = Path(out_dir)
    results = []
    for n, override in enumerate(cells):
        cfg = validate(dict(base, **override))
        finals = []
        for seed in seeds:
            cell_dir = out / f"cell_{n:03d}" / f"seed_{seed}"
            finals.append(run_training(cfg, seed, cell_dir, figures=figures)["final_mean"])
        results.append({"cell": n, "label": _cell_label(override), "overrides": override,
                        "seeds": list(seeds), "final_mean": float(np.mean(finals)),
                        "final_std": float(np.std(finals)), "per_seed": finals})
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", "label", "final_mean", "final_std", "n_seeds"])
        for r in results:
            writer.writerow([r["cell"], r["label"], repr(r["final_mean"]), repr(r["final_std"]),
                             len(r["seeds"])])
    (out / "ablation.json").write_text(json.dumps(results, indent=2) + "\n")
    if figures:
        report.ablation_bars(results, out / "ablation.png", title=base["env.name"])
    return results
