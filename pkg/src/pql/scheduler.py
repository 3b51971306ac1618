"""Speed-ratio control between the actor and the two learners.

Three monotone counters are shared by all processes:

* ``c_a`` -- rollout steps per environment taken by the actor,
* ``c_v`` -- critic updates,
* ``c_p`` -- policy updates.

A process may start its next unit of work only while doing so keeps the
observed ratios ``c_a / c_v`` and ``c_p / c_v`` at or below their targets,
up to a per-process slack. Instead of sleeping for tuned durations, waiters
block on a condition variable and are woken by every counter increment.
"""

from __future__ import annotations

import multiprocessing as mp
import time
from dataclasses import dataclass
from fractions import Fraction

from .errors import ConfigError, NotReady

PROCESSES = ("actor", "vlearner", "plearner")
_INDEX = {"actor": 0, "vlearner": 1, "plearner": 2}


def parse_ratio(text) -> Fraction:
    """Accept ``"1:8"``, ``"1/8"``, ``"0.125"`` or a number."""
    if isinstance(text, (int, float, Fraction)):
        value = Fraction(text).limit_denominator(10**6)
    else:
        s = str(text).strip()
        try:
            if ":" in s:
                a, b = s.split(":")
                value = Fraction(int(a), int(b))
            else:
                value = Fraction(s).limit_denominator(10**6)
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"cannot parse ratio {text!r}") from None
    if value <= 0:
        raise ConfigError(f"ratio must be positive, got {text!r}")
    return value


def format_ratio(value: Fraction) -> str:
    return f"{value.numerator}:{value.denominator}"


@dataclass(frozen=True)
class RatioConfig:
    beta_av: Fraction = Fraction(1, 8)
    beta_pv: Fraction = Fraction(1, 2)
    slack_a: int = 4
    slack_v: int = 32
    slack_p: int = 1
    warmup: int = 32
    free_running: bool = False

    def __post_init__(self):
        if self.beta_av <= 0 or self.beta_pv <= 0:
            raise ConfigError("ratios must be positive")
        if min(self.slack_a, self.slack_v, self.slack_p, self.warmup) < 0:
            raise ConfigError("slack and warm-up must be non-negative")

    @classmethod
    def for_horizon(cls, horizon: int, beta_av=Fraction(1, 8), beta_pv=Fraction(1, 2), warmup=32, free_running=False):
        """Default slacks: one actor send (``horizon`` steps), one policy update,
        and the critic updates that one send pays for."""
        beta_av, beta_pv = Fraction(beta_av), Fraction(beta_pv)
        slack_v = max(1, int(Fraction(horizon) / beta_av))
        return cls(beta_av, beta_pv, horizon, slack_v, 1, warmup, free_running)


def may_proceed(process: str, counters, config: RatioConfig) -> bool:
    """Whether ``process`` may start one more unit of work given ``(c_a, c_v, c_p)``."""
    c_a, c_v, c_p = counters
    if config.free_running or c_a < config.warmup:
        return True
    if process == "actor":
        return c_a + 1 <= config.beta_av * c_v + config.slack_a
    if process == "plearner":
        return c_p + 1 <= config.beta_pv * c_v + config.slack_p
    if process == "vlearner":
        return c_v + 1 <= c_a / config.beta_av + config.slack_v
    raise ValueError(f"unknown process {process!r}")


def observed_ratios(counters) -> tuple[Fraction, Fraction]:
    c_a, c_v, c_p = counters
    if c_v == 0:
        raise NotReady("no critic updates yet")
    return Fraction(c_a, c_v), Fraction(c_p, c_v)


class ProgressCounters:
    """Process-shared monotone counters with blocking waits.

    Build it before starting child processes and pass it to them as an argument.
    """

    def __init__(self, ctx=None):
        ctx = ctx or mp.get_context()
        self._values = ctx.RawArray("q", 3)
        self._cond = ctx.Condition()

    def read(self) -> tuple[int, int, int]:
        with self._cond:
            return tuple(self._values)

    @property
    def c_a(self) -> int:
        return self.read()[0]

    @property
    def c_v(self) -> int:
        return self.read()[1]

    @property
    def c_p(self) -> int:
        return self.read()[2]

    def record(self, process: str, amount: int = 1) -> None:
        if amount < 1:
            raise ValueError("amount must be >= 1")
        with self._cond:
            self._values[_INDEX[process]] += amount
            self._cond.notify_all()

    def notify(self) -> None:
        """Wake all waiters (used on shutdown)."""
        with self._cond:
            self._cond.notify_all()

    def wait(self, process: str, config: RatioConfig, timeout: float | None = None, stop=None) -> bool:
        """Block until ``process`` may proceed. Returns False on timeout or when ``stop`` is set."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not may_proceed(process, tuple(self._values), config):
                if stop is not None and stop.is_set():
                    return False
                remaining = 0.05 if deadline is None else min(0.05, deadline - time.monotonic())
                if remaining <= 0:
                    return False
                self._cond.wait(remaining)
            return True
