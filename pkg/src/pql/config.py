"""Run configuration shared by the runtime and the command line."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from fractions import Fraction

from .agents import ALGOS
from .errors import ConfigError
from .vecenv import TASKS

# Rewards are multiplied by these before n-step assembly so that discounted
# returns stay inside the categorical support of (-10, 10).
REWARD_SCALES = {"pendulum": 0.01, "cartpole_continuous": 0.1, "point_reacher": 0.05}

CLOCKS = ("wall", "logical")


@dataclass(frozen=True)
class RunConfig:
    task: str = "pendulum"
    algo: str = "pql_ddpg"
    n_envs: int = 4096
    batch_size: int = 8192
    buffer_capacity: int = 5_000_000
    gamma: float = 0.99
    tau: float = 0.05
    n_step: int = 3
    lr_actor: float = 5e-4
    lr_critic: float = 5e-4
    grad_clip: float = 0.5
    warm_up: int = 32
    sigma_min: float = 0.05
    sigma_max: float = 0.8
    sigma_fixed: float | None = None
    beta_av: Fraction = Fraction(1, 8)
    beta_pv: Fraction = Fraction(1, 2)
    free_running: bool = False
    horizon: int = 4
    publish_interval: int = 8
    channel_capacity: int = 8
    hidden: tuple[int, ...] = (256, 256)
    reward_scale: float | None = None
    seed: int = 0
    budget_seconds: float | None = None
    budget_steps: int | None = None
    eval_interval: float = 10.0
    eval_episodes: int = 10
    clock: str = "wall"
    out_dir: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {', '.join(TASKS)}", "task")
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown algorithm {self.algo!r}; choose from {', '.join(ALGOS)}", "algo")
        for name in ("n_envs", "batch_size", "buffer_capacity", "n_step", "horizon", "publish_interval",
                     "channel_capacity", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", name)
        if self.warm_up < 0:
            raise ConfigError("must be >= 0", "warm_up")
        for name in ("lr_actor", "lr_critic", "grad_clip", "eval_interval"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be > 0", name)
        if not 0 <= self.gamma <= 1:
            raise ConfigError("must lie in [0, 1]", "gamma")
        if not 0 <= self.tau <= 1:
            raise ConfigError("must lie in [0, 1]", "tau")
        if not 0 <= self.sigma_min <= self.sigma_max:
            raise ConfigError("need 0 <= sigma_min <= sigma_max", "sigma_min")
        if self.sigma_fixed is not None and self.sigma_fixed < 0:
            raise ConfigError("must be >= 0", "sigma_fixed")
        for name in ("beta_av", "beta_pv"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be > 0", name)
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden sizes must be positive", "hidden")
        if self.reward_scale is not None and not (self.reward_scale > 0 and math.isfinite(self.reward_scale)):
            raise ConfigError("must be > 0", "reward_scale")
        if self.budget_seconds is not None and not self.budget_seconds > 0:
            raise ConfigError("must be > 0", "budget_seconds")
        if self.budget_steps is not None and self.budget_steps < 1:
            raise ConfigError("must be >= 1", "budget_steps")
        if self.clock not in CLOCKS:
            raise ConfigError(f"choose from {', '.join(CLOCKS)}", "clock")

    @property
    def scale(self) -> float:
        return REWARD_SCALES[self.task] if self.reward_scale is None else self.reward_scale

    @property
    def parallel(self) -> bool:
        return self.algo.startswith("pql")

    def with_(self, **changes) -> RunConfig:
        return replace(self, **changes)


CONFIG_FIELDS = tuple(f.name for f in fields(RunConfig))
