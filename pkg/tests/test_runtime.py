import csv
import math
import multiprocessing as mp
import threading
import time

import numpy as np
import pytest

from pql.agents import CriticPair
from pql.config import RunConfig
from pql.errors import NotReady
from pql.funcapprox import MlpParams, forward
from pql.replay import NStepBatch
from pql.runtime import (
    METRIC_COLUMNS,
    ActorWorker,
    Models,
    ModelSnapshot,
    PLearnerWorker,
    SyncLoop,
    VLearnerWorker,
    WorkerError,
    evaluate,
    initial_models,
    newer,
    run_parallel,
    run_synchronous,
)

TINY = dict(n_envs=64, batch_size=256, hidden=(32, 32), buffer_capacity=50_000, eval_episodes=4)


def tiny(**kw) -> RunConfig:
    return RunConfig(**{**TINY, **kw})


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_snapshot_kind_and_ordering():
    with pytest.raises(ValueError):
        ModelSnapshot("optimizer", 0, None)
    a, b = ModelSnapshot("policy", 1, None), ModelSnapshot("policy", 2, None)
    assert newer(a, b) is b and newer(b, a) is b and newer(None, a) is a and newer(a, None) is a


def test_actor_rollout_shapes_and_warmup_bounds():
    cfg = tiny(warm_up=2)
    actor = ActorWorker(cfg, initial_models(cfg).policy)
    r = actor.rollout(4)
    assert r.obs.shape == (4, 64, 3) and r.actions.shape == (4, 64, 1) and r.n_transitions == 256
    assert np.all(np.abs(r.actions) <= 2.0)
    assert actor.normalizer.count == 64 * 5
    # rows that did not finish continue from the stored next observation
    live = ~r.dones[-1]
    np.testing.assert_array_equal(actor.obs[live], r.next_obs[-1][live])
    before = actor.obs.copy()
    np.testing.assert_array_equal(actor.rollout(1).obs[0], before)


def test_learners_not_ready_without_data():
    cfg = tiny()
    models = initial_models(cfg)
    v, p = VLearnerWorker(cfg, models), PLearnerWorker(cfg, models)
    assert not v.ready and not p.ready
    with pytest.raises(NotReady):
        v.update()
    with pytest.raises(NotReady):
        p.update()
    assert v.updates == 0 and p.updates == 0


def test_vlearner_reward_scale_applied_at_assembly():
    cfg = tiny(n_step=1, reward_scale=0.5)
    models = initial_models(cfg)
    actor, v = ActorWorker(cfg, models.policy), VLearnerWorker(cfg, models)
    r = actor.rollout(2)
    v.ingest(r, actor.normalizer)
    np.testing.assert_allclose(v.buffer.ordered("returns")[:64], 0.5 * r.rewards[0], rtol=1e-6)
    assert v.transitions_in == 128 and v.records_in == 128


def test_vlearner_gamma_zero_fits_immediate_rewards():
    cfg = tiny(gamma=0.0, hidden=(64, 64), lr_critic=1e-3)
    v = VLearnerWorker(cfg, initial_models(cfg))
    rng = np.random.default_rng(0)
    obs = rng.normal(size=(4096, 3)).astype(np.float32)
    act = rng.uniform(-2, 2, size=(4096, 1)).astype(np.float32)
    target = (0.5 * np.sin(obs[:, 0]) + 0.2 * act[:, 0] * obs[:, 1]).astype(np.float32)
    v.buffer.insert(NStepBatch(obs, act, target, obs, np.zeros(4096, np.float32)))
    for _ in range(2000):
        v.update()
    x = np.concatenate([obs, act], axis=1)
    for q in v.critics.online:
        assert np.mean((forward(q, x)[:, 0] - target) ** 2) < 0.01


def _action_only_critic(rng):
    # input (s, a) with the state columns zeroed so the value depends on a alone
    w1 = rng.normal(size=(8, 4)) * 1.5
    w1[:, :3] = 0.0
    return MlpParams((w1, rng.normal(size=(1, 8))), (rng.normal(size=8), np.zeros(1)), ("tanh", "identity")).astype(np.float32)


def test_plearner_converges_to_critic_argmax():
    cfg = tiny(batch_size=128, lr_actor=3e-3)
    rng = np.random.default_rng(45)
    q1, q2 = _action_only_critic(rng), _action_only_critic(rng)
    grid = np.linspace(-2, 2, 4001, dtype=np.float32)[:, None]
    x = np.concatenate([np.zeros((len(grid), 3), np.float32), grid], axis=1)
    values = np.minimum(forward(q1, x), forward(q2, x))[:, 0]
    best = float(grid[np.argmax(values), 0])
    slope = np.sign(np.diff(values))
    assert abs(best) < 1.9 and np.sum((slope[:-1] > 0) & (slope[1:] < 0)) == 1, "toy objective must be unimodal"
    p = PLearnerWorker(cfg, Models(initial_models(cfg).policy, CriticPair(q1, q2, q1, q2)))
    p.ingest(rng.normal(size=(1024, 3)).astype(np.float32), p.normalizer)
    for _ in range(1500):
        p.update()
    states = rng.normal(size=(64, 3)).astype(np.float32)
    actions = 2.0 * forward(p.policy, states)[:, 0]
    assert np.max(np.abs(actions - best)) < 0.05


def test_evaluate_is_deterministic_and_upright_zero_policy_scores_zero():
    cfg = tiny()
    policy = initial_models(cfg).policy
    snap = ModelSnapshot("policy", 0, policy)
    assert evaluate(snap, "pendulum", 5, seed=3) == evaluate(snap, "pendulum", 5, seed=3)
    zero = policy.with_arrays([np.zeros_like(a) for a in policy.arrays()])
    mean, stderr = evaluate(ModelSnapshot("policy", 0, zero), "pendulum", 4, initial_states=np.zeros((4, 2)))
    assert mean == 0.0 and stderr == 0.0


def test_sync_loop_matches_manual_stepping():
    cfg = tiny(warm_up=0)
    loop = SyncLoop(cfg)
    got = [loop.iteration() for _ in range(3)]

    models = initial_models(cfg)
    actor, v, p = ActorWorker(cfg, models.policy), VLearnerWorker(cfg, models), PLearnerWorker(cfg, models)
    want = []
    for _ in range(3):
        r = actor.rollout(cfg.horizon)
        v.ingest(r, actor.normalizer)
        p.ingest(r.states, actor.normalizer)
        cl, al = [], []
        for k in range(32):
            cl.append(v.update())
            if k % 2 == 1:
                al.append(p.update())
        v.set_policy(p.snapshot(p.updates))
        p.set_critics(v.snapshot(v.updates))
        actor.policy = p.policy
        want.append((cl, al))
    assert got == want


def _child_update(worker, q):
    q.put(worker.update())


def test_learner_update_identical_in_another_process():
    cfg = tiny(warm_up=0)
    loop = SyncLoop(cfg)
    loop.iteration()
    ctx = mp.get_context("spawn")
    q = ctx.Queue()
    for worker in (loop.vlearner, loop.plearner):
        proc = ctx.Process(target=_child_update, args=(worker, q))
        proc.start()
        remote = q.get(timeout=60)
        proc.join()
        assert remote == worker.update()


def test_synchronous_logical_clock_is_byte_identical(tmp_path):
    cfg = tiny(algo="sync_ddpg_n", clock="logical", budget_steps=64 * 80, eval_interval=20)
    a = run_synchronous(cfg, tmp_path / "a")
    b = run_synchronous(cfg, tmp_path / "b")
    assert a.csv_path.read_bytes() == b.csv_path.read_bytes()
    assert a.counters == (80, 640, 320)
    assert (tmp_path / "a" / "checkpoint.bin").exists()


@pytest.mark.parametrize("algo", ["sync_sac_n"])
def test_synchronous_sac_runs(algo, tmp_path):
    r = run_synchronous(tiny(algo=algo, clock="logical", budget_steps=64 * 40, eval_interval=20), tmp_path)
    assert math.isfinite(r.final_return)


def test_parallel_smoke_csv_and_audit(tmp_path):
    cfg = tiny(budget_seconds=8, eval_interval=1)
    r = run_parallel(cfg, tmp_path)
    rows = read_csv(r.csv_path)
    assert tuple(rows[0].keys()) == METRIC_COLUMNS
    t = [float(x["wall_clock_s"]) for x in rows]
    assert len(t) >= 3 and all(a < b for a, b in zip(t, t[1:]))
    for x in rows:
        assert int(x["env_steps"]) == int(x["c_a"]) * cfg.n_envs
    audit = r.audit
    assert audit["complete"] and audit["unique"] == audit["expected"] == audit["consumed"]
    assert audit["transitions"] == audit["expected"] * cfg.horizon * cfg.n_envs
    assert audit["records"] + audit["pending"] == audit["transitions"]
    assert r.workers["actor"]["versions_monotone"]


@pytest.mark.parametrize("algo", ["pql_d", "pql_sac"])
def test_parallel_variants_run(algo, tmp_path):
    r = run_parallel(tiny(algo=algo, budget_seconds=5, eval_interval=2), tmp_path)
    assert r.counters[1] > 0 and r.counters[2] > 0 and math.isfinite(r.final_return)


def test_parallel_stop_event_joins_quickly():
    stop = threading.Event()
    timer = threading.Timer(3.0, stop.set)
    timer.start()
    t0 = time.monotonic()
    r = run_parallel(tiny(budget_seconds=120, eval_interval=1), stop_event=stop)
    assert r.interrupted
    assert time.monotonic() - t0 < 3.0 + 5.0 + 3.0  # stop delay + join bound + final evaluation


def test_parallel_child_fault_propagates():
    with pytest.raises(WorkerError, match="vlearner"):
        run_parallel(tiny(lr_critic=1e30, budget_seconds=60, eval_interval=1))


def test_stop_at_return_ends_at_first_qualifying_evaluation(tmp_path):
    cfg = tiny(algo="sync_ddpg_n", clock="logical", budget_steps=64 * 400, eval_interval=20)
    r = run_synchronous(cfg, tmp_path, stop_at_return=-1e9)
    assert len(r.rows) == 1 and r.counters[0] == 20
