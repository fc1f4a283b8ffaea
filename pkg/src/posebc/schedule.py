"""Diffusion coefficient tables (beta / alpha / alpha-bar / sigma) over T steps.

Tables are built once in double precision and treated as immutable; they are
safe to share read-only across workers. sigma_t = sqrt(beta_t) throughout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class NoiseSchedule:
    """Coefficient tables for a T-step diffusion process (1-indexed lookups)."""

    num_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return self.num_steps == other.num_steps and np.array_equal(self.betas, other.betas)


def build_linear_schedule(num_steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Build a schedule with betas linearly spaced from beta_start to beta_end.

    Both endpoints are included; a single-step schedule uses beta_start alone.
    Raises ConfigError for num_steps < 1 or betas outside (0, 1).
    """
    if num_steps < 1:
        raise ConfigError(f"num_steps must be >= 1, got {num_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if num_steps == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sigmas = np.sqrt(betas)
    for arr in (betas, alphas, alpha_bars, sigmas):
        arr.setflags(write=False)
    return NoiseSchedule(num_steps, betas, alphas, alpha_bars, sigmas)


def coefficients_at(schedule: NoiseSchedule, t: int) -> tuple[float, float, float]:
    """Return (alpha_t, alpha_bar_t, sigma_t) for a 1-based step index t."""
    if not 1 <= t <= schedule.num_steps:
        raise IndexError(f"step index {t} outside [1, {schedule.num_steps}]")
    i = t - 1
    return (
        float(schedule.alphas[i]),
        float(schedule.alpha_bars[i]),
        float(schedule.sigmas[i]),
    )
