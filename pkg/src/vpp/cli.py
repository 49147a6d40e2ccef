"""Command-line entry point: ``vpp train | eval | ablate | infer-check``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .autodiff import CheckpointMismatch
from .checks import run_checks
from .config import ConfigError
from .experiment import run_ablation, run_eval, run_training
from .sac import DataIntegrityError, TrainingAborted

EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("vpp")


def _seed_dirs(seeds: list[int]) -> list[tuple[int, str]]:
    """Run-directory names; a seed given twice gets a suffixed second directory."""
    seen: dict[int, int] = {}
    out = []
    for s in seeds:
        seen[s] = seen.get(s, 0) + 1
        out.append((s, f"seed_{s}" if seen[s] == 1 else f"seed_{s}_run{seen[s]}"))
    return out


def cmd_train(args) -> int:
    cfg = cfgmod.load(args.config)
    out = Path(args.out_dir)
    seeds = args.seed or [cfg["seed"]]

    def progress(row):
        if row["episode"] % args.log_every == 0:
            log.info("episode %d step %d reward %.4f", row["episode"], row["step"],
                     row["mean_group_reward"])

    runs = []
    for seed, name in _seed_dirs(seeds):
        summary = run_training(cfg, seed, out / name, figures=not args.no_figures, progress=progress)
        summary["run_dir"] = name
        runs.append(summary)
        print(json.dumps(summary))
    finals = np.array([r["final_mean"] for r in runs])
    combined = {"env": cfg["env.name"], "seeds": seeds, "final_mean": float(finals.mean()),
                "final_std": float(finals.std()), "runs": runs}
    (out / "summary.json").write_text(json.dumps(combined, indent=2) + "\n")
    print(f"final-100-episode reward: {combined['final_mean']:.4f} +/- {combined['final_std']:.4f} "
          f"over {len(runs)} run(s)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = cfgmod.load(args.config)
    result = run_eval(cfg, args.checkpoint, args.episodes, seed=args.seed, greedy=args.greedy)
    print(json.dumps(result))
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = cfgmod.load(args.base_config)
    try:
        sweep = json.loads(Path(args.sweep_spec).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read sweep spec {args.sweep_spec}: {err}") from None
    if not isinstance(sweep, dict):
        raise ConfigError("sweep spec must be a JSON object of key -> list of values")
    results = run_ablation(base, sweep, args.seeds, args.out_dir, figures=not args.no_figures)
    print("cell,label,final_mean,final_std")
    for r in results:
        print(f"{r['cell']},{r['label']},{r['final_mean']!r},{r['final_std']!r}")
    return EXIT_OK


def cmd_infer_check(args) -> int:
    report = run_checks(args.n_trials, args.seed, inject_fault=args.inject_fault)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    if not report["passed"]:
        print("failed checks: " + ", ".join(report["failures"]), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vpp", description="Variational policy propagation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run per --seed")
    t.add_argument("config")
    t.add_argument("--seed", type=int, action="append", help="repeatable; defaults to the config seed")
    t.add_argument("--out_dir", "--out-dir", default="runs")
    t.add_argument("--log_every", type=int, default=10)
    t.add_argument("--no-figures", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out a saved policy checkpoint")
    e.add_argument("checkpoint", help="checkpoint directory containing policy.json/.bin")
    e.add_argument("config")
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--greedy", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="Cartesian sweep over config overrides")
    a.add_argument("base_config")
    a.add_argument("sweep_spec", help='JSON object, e.g. {"policy.rounds": [1, 2, 3]}')
    a.add_argument("--seeds", type=int, nargs="+", default=[0])
    a.add_argument("--out_dir", "--out-dir", default="ablation")
    a.add_argument("--no-figures", action="store_true")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("infer-check", help="run the invariant self-check suite")
    c.add_argument("--n_trials", "--n-trials", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--inject-fault", action="store_true",
                   help="corrupt the tree-check oracle (negative control)")
    c.add_argument("--out", help="also write the JSON report here")
    c.set_defaults(func=cmd_infer_check)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CheckpointMismatch as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as err:
        where = f" (checkpoint written to {err.checkpoint})" if err.checkpoint else ""
        print(f"runtime fault: {err}{where}", file=sys.stderr)
        return EXIT_RUNTIME
    except (DataIntegrityError, FloatingPointError, ArithmeticError, RuntimeError, OSError) as err:
        print(f"runtime fault: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
