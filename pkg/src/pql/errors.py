"""Exception types shared across the engine."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid configuration value (unknown task, bad ratio, non-positive size)."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class NotReady(RuntimeError):
    """Raised when a quantity is requested before enough data exists."""


class NonFiniteError(FloatingPointError):
    """A NaN or inf reached a place where it indicates upstream divergence."""


def check_finite(name: str, *arrays) -> None:
    import numpy as np

    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values in {name}")
