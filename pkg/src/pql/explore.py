"""Mixed exploration: each environment row gets its own Gaussian noise scale."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float
    sigma_max: float
    sigmas: np.ndarray

    @property
    def n_envs(self) -> int:
        return len(self.sigmas)


def build_schedule(n_envs: int, sigma_min: float = 0.05, sigma_max: float = 0.8) -> NoiseSchedule:
    """Noise levels spread linearly from ``sigma_min`` (row 0) to ``sigma_max`` (last row).

    A single environment gets ``sigma_min``.
    """
    if n_envs < 1:
        raise ValueError("n_envs must be >= 1")
    if sigma_min < 0 or sigma_max < 0:
        raise ValueError("noise scales must be non-negative")
    if sigma_min > sigma_max:
        raise ValueError("sigma_min must not exceed sigma_max")
    if n_envs == 1:
        return NoiseSchedule(sigma_min, sigma_max, np.array([sigma_min]))
    i = np.arange(n_envs)
    sigmas = sigma_min + i / (n_envs - 1) * (sigma_max - sigma_min)
    sigmas[-1] = sigma_max
    return NoiseSchedule(sigma_min, sigma_max, sigmas)


def fixed_schedule(n_envs: int, sigma: float) -> NoiseSchedule:
    """Same noise level everywhere (the fixed-sigma baseline)."""
    return build_schedule(n_envs, sigma, sigma)


def sample_noise(shape, schedule: NoiseSchedule, bounds: tuple[float, float], rng: np.random.Generator):
    """Pre-clamp perturbations, row i drawn i.i.d. from N(0, sigma_i^2) in [-1, 1] action units.

    Sigmas are scaled by the half-width of ``bounds``, so one schedule fits tasks
    with different torque limits.
    """
    low, high = bounds
    return rng.standard_normal(shape) * (schedule.sigmas[:, None] * (high - low) / 2.0)


def apply(actions: np.ndarray, schedule: NoiseSchedule, bounds: tuple[float, float], rng: np.random.Generator):
    noise = sample_noise(actions.shape, schedule, bounds, rng)
    return np.clip(actions + noise.astype(actions.dtype, copy=False), *bounds)
