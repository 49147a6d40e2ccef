import csv
import json

import numpy as np
import pytest

from vpp import cli
from vpp.autodiff import save_checkpoint
from vpp.config import validate
from vpp.envs import EnvironmentFault, TrafficGrid
from vpp.experiment import build, expand_sweep, load_policy, read_metrics, run_eval
from vpp.sac import evaluate

TINY = {
    "env.name": "consensus_grid",
    "train.total_steps": 100,
    "train.batch_size": 16,
    "train.warmup_steps": 16,
    "train.env_steps_per_iteration": 25,
    "policy.embed_dim": 4,
    "policy.hidden": 8,
    "critic.hidden": 8,
}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def metric_columns(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    keep = [i for i, h in enumerate(head) if h != "wallclock_s"]
    return [[r[i] for i in keep] for r in rows]


def test_train_five_seeds(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", TINY)
    out = tmp_path / "runs"
    args = ["train", cfg, "--out_dir", str(out), "--no-figures"]
    for s in range(5):
        args += ["--seed", str(s)]
    assert cli.main(args) == 0
    assert len(list(out.glob("seed_*/metrics.csv"))) == 5
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seeds"] == [0, 1, 2, 3, 4]
    assert np.isclose(summary["final_mean"], np.mean([r["final_mean"] for r in summary["runs"]]))
    echoed = json.loads((out / "seed_0" / "config.json").read_text())
    assert validate(echoed) == echoed
    assert "+/-" in capsys.readouterr().out


def test_train_writes_checkpoints_and_figure(tmp_path):
    cfg = write(tmp_path / "c.json", dict(TINY, **{"train.checkpoint_every": 2}))
    assert cli.main(["train", cfg, "--seed", "0", "--out_dir", str(tmp_path / "r")]) == 0
    run = tmp_path / "r" / "seed_0"
    assert (run / "learning_curve.png").stat().st_size > 0
    assert (run / "checkpoints" / "episode_000002" / "policy.json").exists()
    assert (run / "checkpoints" / "final" / "value_target.bin").exists()
    rows = read_metrics(run / "metrics.csv")
    assert [r["episode"] for r in rows] == [1, 2, 3, 4]
    assert rows[-1]["step"] == 100


def test_repeated_seed_identical_csvs(tmp_path):
    cfg = write(tmp_path / "c.json", TINY)
    out = tmp_path / "r"
    assert cli.main(["train", cfg, "--seed", "7", "--seed", "7", "--out_dir", str(out),
                     "--no-figures"]) == 0
    a = metric_columns(out / "seed_7" / "metrics.csv")
    b = metric_columns(out / "seed_7_run2" / "metrics.csv")
    assert a == b


def test_missing_key_exit_code(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {"env.name": "consensus_grid"})
    assert cli.main(["train", cfg, "--out_dir", str(tmp_path)]) == 2
    assert "train.total_steps" in capsys.readouterr().err


def test_environment_fault_exit_code(tmp_path, monkeypatch, capsys):
    def boom(self, a):
        raise EnvironmentFault("sensor failure")
    monkeypatch.setattr(TrafficGrid, "_step", boom)
    cfg = write(tmp_path / "c.json", dict(TINY, **{"env.name": "traffic_grid", "env.rows": 2,
                                                   "env.cols": 2}))
    assert cli.main(["train", cfg, "--seed", "0", "--out_dir", str(tmp_path / "r")]) == 4
    assert (tmp_path / "r" / "seed_0" / "checkpoints" / "fault" / "policy.json").exists()
    assert "checkpoint" in capsys.readouterr().err


def test_eval_roundtrip(tmp_path, capsys):
    cfg_path = write(tmp_path / "c.json", TINY)
    assert cli.main(["train", cfg_path, "--seed", "0", "--out_dir", str(tmp_path / "r"),
                     "--no-figures"]) == 0
    ck = tmp_path / "r" / "seed_0" / "checkpoints" / "final"
    capsys.readouterr()
    assert cli.main(["eval", str(ck), cfg_path, "--episodes", "20", "--seed", "3"]) == 0
    reported = json.loads(capsys.readouterr().out)
    cfg = validate(TINY)
    env, pol = load_policy(cfg, ck)
    other = evaluate(env, pol, 200, np.random.default_rng(99))
    tol = 4 * np.sqrt(reported["std"] ** 2 / 20 + other.std() ** 2 / 200) + 1e-9
    assert abs(reported["mean"] - other.mean()) <= tol
    assert run_eval(cfg, ck, 5, seed=1) == run_eval(cfg, ck, 5, seed=1)


def test_eval_rejects_zero_episodes(tmp_path):
    cfg = write(tmp_path / "c.json", TINY)
    assert cli.main(["eval", str(tmp_path), cfg, "--episodes", "0"]) == 2


def test_random_policy_checkpoint_scores_minus_six(tmp_path, capsys):
    cfg = validate(TINY)
    _, pol, _, _ = build(cfg, 0)
    pol.store["head.logits.W"].data[...] = 0.0
    pol.store["head.logits.b"].data[...] = 0.0
    save_checkpoint(pol.store.snapshot(), tmp_path / "ck" / "policy")
    cfg_path = write(tmp_path / "c.json", TINY)
    assert cli.main(["eval", str(tmp_path / "ck"), cfg_path, "--episodes", "200"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert abs(res["mean"] + 6.0) < 4 * res["std"] / np.sqrt(200)


def test_eval_architecture_mismatch(tmp_path, capsys):
    cfg = validate(TINY)
    _, pol, _, _ = build(cfg, 0)
    save_checkpoint(pol.store.snapshot(), tmp_path / "ck" / "policy")
    other = write(tmp_path / "c.json", dict(TINY, **{"policy.hidden": 6}))
    assert cli.main(["eval", str(tmp_path / "ck"), other]) == 2
    err = capsys.readouterr().err
    assert "head.hidden.W" in err and "!=" in err


@pytest.mark.parametrize("sweep, cells", [({"policy.rounds": [1, 2, 3]}, 3), ({}, 1)])
def test_ablate_cells(tmp_path, sweep, cells, capsys):
    base = write(tmp_path / "b.json", TINY)
    spec = write(tmp_path / "s.json", sweep)
    out = tmp_path / "abl"
    assert cli.main(["ablate", base, spec, "--seeds", "0", "--out_dir", str(out)]) == 0
    assert len(list(out.glob("cell_*/seed_0/metrics.csv"))) == cells
    assert len(json.loads((out / "ablation.json").read_text())) == cells
    assert (out / "ablation.png").exists()
    assert capsys.readouterr().out.startswith("cell,label")


def test_ablate_refresh_interval_on_spread(tmp_path):
    base = write(tmp_path / "b.json", dict(TINY, **{"env.name": "spread_grid", "env.n_agents": 4,
                                                    "env.n_landmarks": 2, "env.k_neighbors": 2,
                                                    "env.episode_length": 10,
                                                    "train.total_steps": 20}))
    spec = write(tmp_path / "s.json", {"env.refresh_interval": [1, 5, 10]})
    assert cli.main(["ablate", base, spec, "--out_dir", str(tmp_path / "a"), "--no-figures"]) == 0
    assert len(list((tmp_path / "a").glob("cell_*/seed_0"))) == 3


def test_ablate_unknown_key(tmp_path, capsys):
    base = write(tmp_path / "b.json", TINY)
    spec = write(tmp_path / "s.json", {"policy.depth": [1, 2]})
    assert cli.main(["ablate", base, spec, "--out_dir", str(tmp_path / "a")]) == 2
    assert "policy.depth" in capsys.readouterr().err


def test_expand_sweep():
    assert expand_sweep({}) == [{}]
    assert len(expand_sweep({"a": [1, 2], "b": [3, 4, 5]})) == 6


def test_infer_check_default_and_fault(tmp_path, capsys):
    import time
    t0 = time.perf_counter()
    assert cli.main(["infer-check", "--out", str(tmp_path / "r.json")]) == 0
    assert time.perf_counter() - t0 < 60
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["passed"] and report["n_trials"] == 100
    assert all({"name", "passed", "detail"} <= set(c) for c in report["checks"])
    capsys.readouterr()
    assert cli.main(["infer-check", "--n_trials", "5", "--inject-fault"]) == 3
    assert "variational.tree_exactness" in capsys.readouterr().err


def test_infer_check_trial_count(capsys):
    assert cli.main(["infer-check", "--n_trials", "3", "--seed", "4"]) == 0
    assert json.loads(capsys.readouterr().out)["n_trials"] == 3
