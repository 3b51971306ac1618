"""Ring replay buffers and per-environment n-step return assembly."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import NotReady


@dataclass
class TransitionBatch:
    """One environment step for all N rows.

    ``next_obs`` is the observation reached by the step, before auto-reset
    (``StepResult.terminal_observations``). ``rewards`` are already scaled.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    truncated: np.ndarray
    next_obs: np.ndarray

    @property
    def terminated(self) -> np.ndarray:
        return self.dones & ~self.truncated

    @classmethod
    def from_step(cls, obs, actions, result, reward_scale: float = 1.0) -> TransitionBatch:
        return cls(
            obs=obs,
            actions=actions,
            rewards=result.rewards * reward_scale,
            dones=result.dones,
            truncated=result.truncated,
            next_obs=result.terminal_observations,
        )


@dataclass
class NStepBatch:
    obs: np.ndarray
    actions: np.ndarray
    returns: np.ndarray
    next_obs: np.ndarray
    discounts: np.ndarray

    def __len__(self) -> int:
        return len(self.returns)

    @classmethod
    def concat(cls, batches) -> NStepBatch:
        return cls(*(np.concatenate([getattr(b, f.name) for b in batches]) for f in fields(cls)))


@dataclass
class NStepRecords(NStepBatch):
    """Assembler output; also carries which env row and step each record starts at."""

    env_index: np.ndarray = None
    start_step: np.ndarray = None


class NStepAssembler:
    """Turns lockstep per-env transitions into n-step records.

    All N rows advance together, so the rolling window for every row lives at
    ring slot ``t % n``; only the number of pending steps differs per row.
    A record for time t is emitted once n steps have elapsed, or earlier with a
    shortened horizon when the episode ends. A true termination zeroes the
    effective discount, a time-limit truncation keeps it and bootstraps from
    the pre-reset observation.
    """

    def __init__(self, n_envs: int, obs_dim: int, act_dim: int, n_step: int, gamma: float, dtype=np.float32):
        if n_step < 1:
            raise ValueError("n_step must be >= 1")
        self.n_envs, self.n, self.gamma, self.dtype = n_envs, n_step, gamma, dtype
        self.obs = np.zeros((n_step, n_envs, obs_dim), dtype)
        self.actions = np.zeros((n_step, n_envs, act_dim), dtype)
        self.rewards = np.zeros((n_step, n_envs), dtype)
        self.pending = np.zeros(n_envs, dtype=np.int64)
        self.t = 0
        self._gamma_pow = [gamma**k for k in range(n_step + 1)]

    @property
    def open_windows(self) -> int:
        """Steps seen but not yet emitted as records (a full window has already emitted its oldest)."""
        return int(np.minimum(self.pending, self.n - 1).sum())

    def push(self, batch: TransitionBatch) -> NStepRecords:
        n, t = self.n, self.t
        slot = t % n
        self.obs[slot] = batch.obs
        self.actions[slot] = batch.actions
        self.rewards[slot] = batch.rewards
        self.pending = np.minimum(self.pending + 1, n)
        dones = np.asarray(batch.dones, dtype=bool)
        alive = 1 - np.asarray(batch.terminated, dtype=self.dtype)

        out = []
        for j in reversed(range(n)):  # record starting at t - j, horizon j + 1
            emit = (self.pending > j) & (dones | (j == n - 1))
            idx = np.nonzero(emit)[0]
            if idx.size == 0:
                continue
            ret = np.zeros(idx.size, self.dtype)
            for k in range(j + 1):
                ret += self._gamma_pow[k] * self.rewards[(t - j + k) % n, idx]
            start = (t - j) % n
            out.append(
                NStepRecords(
                    obs=self.obs[start, idx],
                    actions=self.actions[start, idx],
                    returns=ret,
                    next_obs=np.asarray(batch.next_obs, dtype=self.dtype)[idx],
                    discounts=(self._gamma_pow[j + 1] * alive[idx]).astype(self.dtype),
                    env_index=idx,
                    start_step=np.full(idx.size, t - j),
                )
            )
        self.pending[dones] = 0
        self.t += 1
        if not out:
            return self._empty()
        return NStepRecords(
            *(np.concatenate([getattr(r, f.name) for r in out]) for f in fields(NStepRecords))
        )

    def _empty(self) -> NStepRecords:
        od, ad = self.obs.shape[2], self.actions.shape[2]
        return NStepRecords(
            obs=np.zeros((0, od), self.dtype),
            actions=np.zeros((0, ad), self.dtype),
            returns=np.zeros(0, self.dtype),
            next_obs=np.zeros((0, od), self.dtype),
            discounts=np.zeros(0, self.dtype),
            env_index=np.zeros(0, np.int64),
            start_step=np.zeros(0, np.int64),
        )


class _Ring:
    """Columnar fixed-capacity storage with overwrite-oldest semantics."""

    def __init__(self, capacity: int, columns: dict[str, tuple[tuple[int, ...], object]], warmup: int = 1):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.warmup = max(1, warmup)
        self.columns = {name: np.zeros((capacity, *shape), dtype) for name, (shape, dtype) in columns.items()}
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    @property
    def ready(self) -> bool:
        return self.size >= self.warmup

    def _insert(self, data: dict[str, np.ndarray]) -> None:
        k = len(next(iter(data.values())))
        if k == 0:
            return
        skip = max(0, k - self.capacity)
        pos = (self.cursor + skip + np.arange(k - skip)) % self.capacity
        for name, col in self.columns.items():
            col[pos] = data[name][skip:]
        self.cursor = (self.cursor + k) % self.capacity
        self.size = min(self.size + k, self.capacity)

    def _sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if not self.ready:
            raise NotReady(f"buffer holds {self.size} entries, needs {self.warmup}")
        return rng.integers(0, self.size, size=batch_size)

    def ordered(self, name: str) -> np.ndarray:
        """Column contents oldest-first (for inspection)."""
        col = self.columns[name]
        if self.size < self.capacity:
            return col[: self.size].copy()
        return np.concatenate([col[self.cursor :], col[: self.cursor]])


class ReplayBuffer(_Ring):
    def __init__(self, capacity: int, obs_dim: int, act_dim: int, warmup: int = 1, dtype=np.float32):
        super().__init__(
            capacity,
            {
                "obs": ((obs_dim,), dtype),
                "actions": ((act_dim,), dtype),
                "returns": ((), dtype),
                "next_obs": ((obs_dim,), dtype),
                "discounts": ((), dtype),
            },
            warmup,
        )

    def insert(self, records: NStepBatch) -> None:
        self._insert({f.name: getattr(records, f.name) for f in fields(NStepBatch)})

    def sample(self, batch_size: int, rng: np.random.Generator) -> NStepBatch:
        idx = self._sample_indices(batch_size, rng)
        # fancy indexing copies, so the batch is stable under later inserts
        return NStepBatch(**{name: col[idx] for name, col in self.columns.items()})


class StateBuffer(_Ring):
    def __init__(self, capacity: int, obs_dim: int, warmup: int = 1, dtype=np.float32):
        super().__init__(capacity, {"obs": ((obs_dim,), dtype)}, warmup)

    def insert(self, states: np.ndarray) -> None:
        self._insert({"obs": np.asarray(states)})

    def sample(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        return self.columns["obs"][self._sample_indices(batch_size, rng)]
