import csv
import os
import signal
import subprocess
import sys
import time
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pql.cli import EXIT_USAGE, main, parse, parse_config_text, render, sweep, sweep_value
from pql.config import RunConfig
from pql.errors import ConfigError

SMALL = ["--n-envs", "64", "--batch-size", "128", "--hidden", "16,16", "--buffer-capacity", "20000", "--eval-episodes", "2"]


def test_empty_args_give_table_defaults():
    _, cfg = parse(["run"])
    assert cfg == RunConfig()
    assert (cfg.n_envs, cfg.batch_size, cfg.buffer_capacity) == (4096, 8192, 5_000_000)
    assert (cfg.gamma, cfg.tau, cfg.n_step, cfg.warm_up) == (0.99, 0.05, 3, 32)
    assert (cfg.lr_actor, cfg.lr_critic, cfg.grad_clip) == (5e-4, 5e-4, 0.5)
    assert (cfg.sigma_min, cfg.sigma_max) == (0.05, 0.8)
    assert (cfg.beta_av, cfg.beta_pv) == (Fraction(1, 8), Fraction(1, 2))


def test_ratio_flag():
    _, cfg = parse(["run", "--beta-av", "1:4", "--beta-pv", "1/6", "--free-running"])
    assert cfg.beta_av == Fraction(1, 4) and cfg.beta_pv == Fraction(1, 6) and cfg.free_running


def test_bad_values_name_the_field():
    with pytest.raises(ConfigError) as err:
        parse(["run", "--n-envs", "0"])
    assert err.value.field == "n_envs"
    with pytest.raises(ConfigError) as err:
        parse(["run", "--gamma", "abc"])
    assert err.value.field == "gamma"
    assert main(["run", "--n-envs", "0", "--budget-seconds", "1"]) == EXIT_USAGE
    assert main(["run"]) == EXIT_USAGE  # no budget


def test_config_file_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk run\nn-envs = 256\nbeta_av=1:4\nseed=3\n")
    _, cfg = parse(["run", "--config", str(path), "--seed", "9"])
    assert (cfg.n_envs, cfg.beta_av, cfg.seed) == (256, Fraction(1, 4), 9)
    assert cfg.batch_size == 8192


def test_config_file_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError, match="colour"):
        parse_config_text("colour=blue\n")
    path = tmp_path / "bad.cfg"
    path.write_text("n_envs 12\n")
    assert main(["run", "--config", str(path)]) == EXIT_USAGE


configs = st.builds(
    RunConfig,
    task=st.sampled_from(["pendulum", "cartpole_continuous", "point_reacher"]),
    algo=st.sampled_from(["pql_ddpg", "pql_d", "pql_sac", "sync_ddpg_n", "sync_sac_n"]),
    n_envs=st.integers(1, 10_000),
    batch_size=st.integers(1, 10_000),
    gamma=st.floats(0, 1),
    tau=st.floats(0, 1),
    lr_actor=st.floats(1e-8, 1.0),
    sigma_fixed=st.none() | st.floats(0, 2),
    beta_av=st.fractions(min_value=Fraction(1, 64), max_value=8),
    beta_pv=st.fractions(min_value=Fraction(1, 64), max_value=8),
    free_running=st.booleans(),
    hidden=st.lists(st.integers(1, 512), min_size=1, max_size=3).map(tuple),
    reward_scale=st.none() | st.floats(1e-4, 10),
    budget_seconds=st.none() | st.floats(0.5, 1e5),
    budget_steps=st.none() | st.integers(1, 10**9),
    clock=st.sampled_from(["wall", "logical"]),
    out_dir=st.none() | st.sampled_from(["runs", "/tmp/x y"]),
)


@settings(max_examples=200, deadline=None)
@given(configs)
def test_render_parse_round_trip(cfg):
    assert RunConfig(**parse_config_text(render(cfg))) == cfg


def test_smoke_run_writes_parseable_csv(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("PQL_OUT_DIR", str(tmp_path))
    code = main(["run", "--algo", "sync_ddpg_n", *SMALL, "--budget-steps", "6400", "--eval-interval", "1", "--plot"])
    assert code == 0
    out = tmp_path / "sync_ddpg_n-pendulum-seed0"
    with open(out / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(float(r["eval_return_mean"]) < 0 for r in rows)
    assert (out / "learning_curve.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert (out / "checkpoint.bin").exists()
    assert "final_return=" in capsys.readouterr().out


def test_identical_sync_runs_identical_csv(tmp_path):
    args = ["run", "--algo", "sync_ddpg_n", *SMALL, "--budget-steps", "6400", "--clock", "logical", "--eval-interval", "25"]
    assert main([*args, "--out-dir", str(tmp_path / "a")]) == 0
    assert main([*args, "--out-dir", str(tmp_path / "b")]) == 0
    name = "sync_ddpg_n-pendulum-seed0/metrics.csv"
    assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def _table(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_sweep_n_envs_rows(tmp_path):
    _, base = parse(["sweep", "--axis", "n_envs", "--values", "x", "--algo", "sync_ddpg_n", *SMALL,
                     "--budget-steps", "4096", "--clock", "logical", "--eval-interval", "100"])
    reports, table = sweep("n_envs", [256, 1024, 4096], base.with_(budget_steps=4096 * 6), tmp_path)
    rows = _table(table)
    assert [r["value"] for r in rows] == ["256", "1024", "4096"]
    assert all(r["status"] == "ok" for r in rows)


def test_sweep_sigma_fixed_with_mixed(tmp_path):
    base = RunConfig(algo="sync_ddpg_n", n_envs=32, batch_size=64, hidden=(8,), buffer_capacity=5000,
                     eval_episodes=1, budget_steps=32 * 8, clock="logical", eval_interval=100)
    values = [sweep_value("sigma_fixed", v) for v in "0.2,0.4,0.6,0.8,mixed".split(",")]
    reports, table = sweep("sigma_fixed", values, base, tmp_path)
    assert len(reports) == 5 and [r["value"] for r in _table(table)][-1] == "mixed"


def test_sweep_records_failures_and_continues(tmp_path):
    base = RunConfig(algo="sync_ddpg_n", n_envs=32, batch_size=64, hidden=(8,), buffer_capacity=5000,
                     eval_episodes=1, budget_steps=32 * 8, clock="logical", eval_interval=100)
    reports, table = sweep("batch_size", [0, 64], base, tmp_path)
    rows = _table(table)
    assert rows[0]["status"].startswith("failed") and rows[1]["status"] == "ok"
    assert reports[0] is None and reports[1] is not None
    with pytest.raises(ConfigError):
        sweep("batch_size", [64], base, tmp_path)


def test_sigint_shuts_down_within_bound(tmp_path):
    env = {**os.environ, "PQL_OUT_DIR": str(tmp_path)}
    cmd = [sys.executable, "-m", "pql", "run", *SMALL, "--budget-seconds", "120", "--eval-interval", "1"]
    proc = subprocess.Popen(cmd, env=env, stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    metrics = tmp_path / "pql_ddpg-pendulum-seed0" / "metrics.csv"
    deadline = time.monotonic() + 60
    while time.monotonic() < deadline and (not metrics.exists() or metrics.read_text().count("\n") < 3):
        time.sleep(0.2)
    proc.send_signal(signal.SIGINT)
    t0 = time.monotonic()
    proc.wait(timeout=30)
    assert time.monotonic() - t0 < 8.0  # five second join bound plus a final evaluation
    assert proc.returncode == 1
    assert "pql-" not in subprocess.run(["ps", "-eo", "comm"], capture_output=True, text=True).stdout
