"""Noise schedules for the forward corruption process.

A schedule over T steps holds, 0-indexed by t-1 for t in [1, T]:
    beta[t-1]          per-step noise variance
    alpha[t-1]         1 - beta_t
    alpha_bar[t-1]     prod_{s<=t} alpha_s
    posterior_var[t-1] beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t),
                       with alpha_bar_0 defined as 1 (so the t=1 entry is 0)

``posterior_log_var_clipped`` replaces the degenerate t=1 entry with the t=2
value so that log-variance interpolation and the t=1 reconstruction term stay
finite. All arrays are float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    posterior_log_var_clipped: np.ndarray

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [1, {self.T}]")
        return t

    def alpha_bar_prev(self, t: int) -> float:
        """alpha_bar_{t-1} with the t=1 convention alpha_bar_0 = 1."""
        t = self.check_t(t)
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])


def from_betas(beta: np.ndarray) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 1:
        raise ScheduleError(f"beta must be a non-empty vector, got shape {beta.shape}")
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ScheduleError("beta values must lie strictly in (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = beta * (1.0 - prev) / (1.0 - alpha_bar)
    clipped = posterior_var.copy()
    if clipped.size > 1:
        clipped[0] = clipped[1]
    else:
        clipped[0] = beta[0]
    return NoiseSchedule(
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        posterior_var=posterior_var,
        posterior_log_var_clipped=np.log(clipped),
    )


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas, endpoints inclusive; T=1 uses beta_start alone."""
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    return from_betas(np.linspace(beta_start, beta_end, T))
