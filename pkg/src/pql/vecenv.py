"""Batched classic-control tasks with auto-reset.

Every environment row owns a counter-based random stream keyed by
``(seed, row index, episode number, draw number)``, so a row behaves the same
whether it is simulated inside a batch of 4096 or on its own
(``index_offset`` selects which global row a small batch represents).
Internal state is kept as structure-of-arrays: ``state[field, row]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonFiniteError

TASKS = ("pendulum", "cartpole_continuous", "point_reacher")

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def counter_uniform(key: int, rows: np.ndarray, episodes: np.ndarray, draw: int) -> np.ndarray:
    """Uniform [0, 1) variates, one per row, from a stateless hash of the counters."""
    with np.errstate(over="ignore"):
        h = _splitmix(np.full(rows.shape, key, dtype=np.uint64) ^ rows.astype(np.uint64))
        h = _splitmix(h ^ episodes.astype(np.uint64))
        h = _splitmix(h ^ np.uint64(draw))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def _seed_key(seed: int) -> int:
    with np.errstate(over="ignore"):
        return int(_splitmix(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))[0])


def angle_normalize(x):
    return ((x + np.pi) % (2 * np.pi)) - np.pi


class Task:
    name: str
    obs_dim: int
    act_dim: int
    phys_dim: int
    action_low: float
    action_high: float
    max_episode_len: int
    n_reset_draws: int

    def initial_state(self, u: np.ndarray) -> np.ndarray:
        """Map uniforms ``[n_reset_draws, n]`` to states ``[phys_dim, n]``."""
        raise NotImplementedError

    def observe(self, state: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def advance(self, state: np.ndarray, action: np.ndarray):
        """One control step; returns (new_state, reward, terminated)."""
        raise NotImplementedError


class Pendulum(Task):
    name = "pendulum"
    obs_dim, act_dim, phys_dim = 3, 1, 2
    action_low, action_high = -2.0, 2.0
    max_episode_len = 200
    n_reset_draws = 2

    dt, g, m, l, max_speed = 0.05, 10.0, 1.0, 1.0, 8.0

    def initial_state(self, u):
        return np.stack([np.pi * (2.0 * u[0] - 1.0), 2.0 * u[1] - 1.0])

    def observe(self, state):
        th, thdot = state
        return np.stack([np.cos(th), np.sin(th), thdot], axis=1)

    def advance(self, state, action):
        th, thdot = state
        u = action[:, 0]
        reward = -(angle_normalize(th) ** 2 + 0.1 * thdot**2 + 0.001 * u**2)
        acc = 3.0 * self.g / (2.0 * self.l) * np.sin(th) + 3.0 / (self.m * self.l**2) * u
        new_thdot = np.clip(thdot + acc * self.dt, -self.max_speed, self.max_speed)
        new_th = th + new_thdot * self.dt
        return np.stack([new_th, new_thdot]), reward, np.zeros(th.shape, dtype=bool)


class CartpoleContinuous(Task):
    name = "cartpole_continuous"
    obs_dim, act_dim, phys_dim = 4, 1, 4
    action_low, action_high = -10.0, 10.0
    max_episode_len = 500
    n_reset_draws = 4

    dt = 0.02
    gravity, masscart, masspole, half_length = 9.8, 1.0, 0.1, 0.5
    x_limit = 2.4
    theta_limit = 12.0 * 2.0 * math.pi / 360.0

    def initial_state(self, u):
        return 0.1 * u - 0.05

    def observe(self, state):
        return state.T.copy()

    def advance(self, state, action):
        x, x_dot, th, th_dot = state
        force = action[:, 0]
        total_mass = self.masscart + self.masspole
        pml = self.masspole * self.half_length
        cos, sin = np.cos(th), np.sin(th)
        temp = (force + pml * th_dot**2 * sin) / total_mass
        th_acc = (self.gravity * sin - cos * temp) / (
            self.half_length * (4.0 / 3.0 - self.masspole * cos**2 / total_mass)
        )
        x_acc = temp - pml * th_acc * cos / total_mass
        x_dot = x_dot + self.dt * x_acc
        x = x + self.dt * x_dot
        th_dot = th_dot + self.dt * th_acc
        th = th + self.dt * th_dot
        terminated = (np.abs(x) > self.x_limit) | (np.abs(th) > self.theta_limit)
        reward = 1.0 - 0.01 * np.abs(force)
        return np.stack([x, x_dot, th, th_dot]), reward, terminated


class PointReacher(Task):
    name = "point_reacher"
    obs_dim, act_dim, phys_dim = 6, 2, 6
    action_low, action_high = -1.0, 1.0
    max_episode_len = 100
    n_reset_draws = 4

    dt, damping = 0.1, 1.0

    def initial_state(self, u):
        p = 2.0 * u[0:2] - 1.0
        g = 2.0 * u[2:4] - 1.0
        return np.concatenate([p, np.zeros_like(p), g])

    def observe(self, state):
        return state.T.copy()

    def advance(self, state, action):
        p, v, g = state[0:2], state[2:4], state[4:6]
        v = v + self.dt * (action.T - self.damping * v)
        p = p + self.dt * v
        reward = -np.sqrt(((p - g) ** 2).sum(axis=0))
        return np.concatenate([p, v, g]), reward, np.zeros(p.shape[1], dtype=bool)


_TASK_TYPES = {t.name: t for t in (Pendulum, CartpoleContinuous, PointReacher)}


def get_task(task_id: str) -> Task:
    try:
        return _TASK_TYPES[task_id]()
    except KeyError:
        raise ConfigError(f"unknown task {task_id!r}; expected one of {TASKS}", "task") from None


@dataclass
class StepResult:
    next_observations: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    truncated: np.ndarray
    terminal_observations: np.ndarray
    """Observation reached by this step, before any auto-reset (equals next_observations where not done)."""

    @property
    def terminated(self) -> np.ndarray:
        return self.dones & ~self.truncated


class EnvBatch:
    def __init__(self, task: Task, n_envs: int, seed: int, index_offset: int = 0):
        if n_envs < 1:
            raise ConfigError("must be >= 1", "n_envs")
        self.task = task
        self.n_envs = n_envs
        self.seed = seed
        self.rows = np.arange(index_offset, index_offset + n_envs, dtype=np.uint64)
        self._key = _seed_key(seed)
        self.episodes = np.zeros(n_envs, dtype=np.uint64)
        self.episode_step = np.zeros(n_envs, dtype=np.int64)
        self.state = np.zeros((task.phys_dim, n_envs))
        self.observations = self.reset_all()

    @property
    def obs_dim(self) -> int:
        return self.task.obs_dim

    @property
    def act_dim(self) -> int:
        return self.task.act_dim

    @property
    def action_bounds(self) -> tuple[float, float]:
        return self.task.action_low, self.task.action_high

    @property
    def internal_state(self) -> np.ndarray:
        return self.state.T

    def _draw_initial(self, idx: np.ndarray) -> np.ndarray:
        u = np.stack(
            [
                counter_uniform(self._key, self.rows[idx], self.episodes[idx], k)
                for k in range(self.task.n_reset_draws)
            ]
        )
        self.episodes[idx] += np.uint64(1)
        return self.task.initial_state(u)

    def reset_all(self) -> np.ndarray:
        idx = np.arange(self.n_envs)
        self.state = self._draw_initial(idx)
        self.episode_step[:] = 0
        self.observations = self.task.observe(self.state).astype(np.float32)
        return self.observations.copy()

    def set_state(self, state: np.ndarray, episode_step: np.ndarray | None = None) -> None:
        """Overwrite the physical state (``[N x phys_dim]``); used by tests and evaluation."""
        self.state = np.array(state, dtype=np.float64).T.copy()
        if episode_step is not None:
            self.episode_step[:] = episode_step
        self.observations = self.task.observe(self.state).astype(np.float32)

    def step(self, actions: np.ndarray) -> StepResult:
        actions = np.asarray(actions, dtype=np.float64).reshape(self.n_envs, self.task.act_dim)
        if not np.all(np.isfinite(actions)):
            raise NonFiniteError("non-finite action passed to env.step")
        actions = np.clip(actions, self.task.action_low, self.task.action_high)

        state, reward, terminated = self.task.advance(self.state, actions)
        self.episode_step += 1
        truncated = (self.episode_step >= self.task.max_episode_len) & ~terminated
        dones = terminated | truncated

        terminal_obs = self.task.observe(state).astype(np.float32)
        next_obs = terminal_obs
        if dones.any():
            idx = np.nonzero(dones)[0]
            state[:, idx] = self._draw_initial(idx)
            self.episode_step[idx] = 0
            next_obs = terminal_obs.copy()
            next_obs[idx] = self.task.observe(state[:, idx]).astype(np.float32)
        self.state = state
        self.observations = next_obs
        return StepResult(
            next_observations=next_obs.copy(),
            rewards=reward,
            dones=dones,
            truncated=truncated,
            terminal_observations=terminal_obs,
        )


def make_env(task_id: str, n_envs: int, seed: int, index_offset: int = 0) -> EnvBatch:
    return EnvBatch(get_task(task_id), n_envs, seed, index_offset)
