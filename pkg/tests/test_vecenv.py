import math
import time

import numpy as np
import pytest

from pql.errors import ConfigError, NonFiniteError
from pql.vecenv import CartpoleContinuous, make_env


def test_make_env_shapes_and_reset():
    env = make_env("pendulum", 4096, seed=0)
    assert env.observations.shape == (4096, 3)
    assert np.all(env.episode_step == 0)
    assert make_env("cartpole_continuous", 2, seed=1).observations.shape == (2, 4)
    assert make_env("point_reacher", 3, seed=1).observations.shape == (3, 6)


def test_make_env_deterministic():
    a = make_env("pendulum", 1, seed=7).observations
    b = make_env("pendulum", 1, seed=7).observations
    np.testing.assert_array_equal(a, b)
    c = make_env("pendulum", 1, seed=8).observations
    assert not np.array_equal(a, c)


def test_unknown_task():
    with pytest.raises(ConfigError):
        make_env("hopper", 4, 0)
    with pytest.raises(ConfigError):
        make_env("pendulum", 0, 0)


def test_pendulum_upright_equilibrium():
    env = make_env("pendulum", 1, 0)
    env.set_state(np.array([[0.0, 0.0]]))
    res = env.step(np.zeros((1, 1)))
    assert res.rewards[0] == 0.0
    assert abs(env.internal_state[0, 0]) < 1e-12


def test_pendulum_hanging_one_step():
    env = make_env("pendulum", 1, 0)
    env.set_state(np.array([[math.pi, 0.0]]))
    env.step(np.zeros((1, 1)))
    th, thdot = env.internal_state[0]
    # dt * 3g/(2l) * sin(pi) is round-off only
    assert abs(thdot - 0.05 * 15.0 * math.sin(math.pi)) < 1e-15
    assert abs(th - math.pi) < 1e-15


def test_time_limit_auto_reset():
    env = make_env("pendulum", 4, 3)
    env.set_state(np.tile([[0.5, 0.2]], (4, 1)), episode_step=np.array([199, 10, 199, 0]))
    res = env.step(np.zeros((4, 1)))
    np.testing.assert_array_equal(res.dones, [True, False, True, False])
    np.testing.assert_array_equal(res.truncated, res.dones)
    assert not res.terminated.any()
    # terminal observation belongs to the finished episode, next observation to a fresh one
    np.testing.assert_array_equal(res.terminal_observations[1], res.next_observations[1])
    assert not np.allclose(res.terminal_observations[0], res.next_observations[0])
    np.testing.assert_array_equal(env.episode_step, [0, 11, 0, 1])


def test_pendulum_reset_bounds():
    env = make_env("pendulum", 100_000, 11)
    th, thdot = env.internal_state.T
    assert th.min() >= -math.pi and th.max() <= math.pi
    assert thdot.min() >= -1 and thdot.max() <= 1
    # a second reset draws fresh states from the same distribution
    env.reset_all()
    th2 = env.internal_state[:, 0]
    assert th2.min() >= -math.pi and th2.max() <= math.pi
    assert not np.array_equal(th, th2)


def test_reset_matches_at_same_stream_position():
    a, b = make_env("point_reacher", 5, 2), make_env("point_reacher", 5, 2)
    np.testing.assert_array_equal(a.reset_all(), b.reset_all())
    assert np.all(a.episode_step == 0)


def test_non_finite_action_faults():
    env = make_env("pendulum", 2, 0)
    with pytest.raises(NonFiniteError):
        env.step(np.array([[0.0], [np.nan]]))


@pytest.mark.parametrize("task", ["pendulum", "cartpole_continuous", "point_reacher"])
@pytest.mark.parametrize("k", [1, 7, 64])
def test_batch_of_one_equivalence(task, k):
    batch = make_env(task, k, seed=5)
    singles = [make_env(task, 1, seed=5, index_offset=i) for i in range(k)]
    rng = np.random.default_rng(0)
    lo, hi = batch.action_bounds
    np.testing.assert_array_equal(batch.observations, np.concatenate([s.observations for s in singles]))
    for _ in range(250):
        act = rng.uniform(lo, hi, size=(k, batch.act_dim))
        res = batch.step(act)
        parts = [s.step(act[i : i + 1]) for i, s in enumerate(singles)]
        np.testing.assert_array_equal(res.next_observations, np.concatenate([p.next_observations for p in parts]))
        np.testing.assert_array_equal(res.rewards, np.concatenate([p.rewards for p in parts]))
        np.testing.assert_array_equal(res.dones, np.concatenate([p.dones for p in parts]))


def test_cartpole_auto_reset_correctness():
    env = make_env("cartpole_continuous", 256, seed=4)
    rng = np.random.default_rng(1)
    task = CartpoleContinuous()
    seen = 0
    for _ in range(300):
        res = env.step(rng.uniform(-10, 10, size=(256, 1)))
        term = res.terminated
        if term.any():
            seen += term.sum()
            t_obs = res.terminal_observations[term]
            assert np.all((np.abs(t_obs[:, 0]) > task.x_limit) | (np.abs(t_obs[:, 2]) > task.theta_limit))
            assert np.all(np.abs(res.next_observations[res.dones]) <= 0.05)
    assert seen > 0


def test_step_throughput_scales_sublinearly():
    def per_call(n):
        env = make_env("pendulum", n, 0)
        act = np.zeros((n, 1))
        env.step(act)
        t0 = time.perf_counter()
        for _ in range(200):
            env.step(act)
        return (time.perf_counter() - t0) / 200

    assert per_call(4096) < 64 * per_call(64)
