"""Linear beta schedule and the closed-form scalars derived from it.

All public accessors take a 1-based timestep ``t`` in ``[1, T]``. Arrays are
stored 0-based, so ``betas[t - 1]`` holds beta at step ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


class ScheduleError(ValueError):
    """Invalid schedule parameters or out-of-range timestep."""


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    alpha_bar_prev: np.ndarray
    posterior_variances: np.ndarray

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars", "alpha_bar_prev", "posterior_variances"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ScheduleError(f"timestep out of range [1, {self.T}]: {t.min()}..{t.max()}")

    def at(self, name: str, t: int) -> float:
        """Scalar lookup of a schedule array at 1-based step ``t``."""
        self.check_t(t)
        return float(getattr(self, name)[int(t) - 1])

    def gather(self, name: str, t: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
        """Per-batch lookup, shaped ``[B, 1, 1, 1]`` for broadcasting over images."""
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        self.check_t(t.numpy())
        values = torch.tensor(getattr(self, name), dtype=torch.float64)[t - 1]
        return values.to(dtype).view(-1, 1, 1, 1)

    def rows(self):
        for i in range(self.T):
            yield i + 1, self.betas[i], self.alpha_bars[i], self.posterior_variances[i]


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start!r}, {beta_end!r}"
        )
    T = int(T)
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        steps = np.arange(T, dtype=np.float64)
        betas = beta_start + steps / (T - 1) * (beta_end - beta_start)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior_variances = (1.0 - alpha_bar_prev) * (1.0 - alphas) / (1.0 - alpha_bars)
    return NoiseSchedule(
        T=T,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        alpha_bar_prev=alpha_bar_prev,
        posterior_variances=posterior_variances,
    )


def posterior_mean_coeffs(s: NoiseSchedule, t: int) -> tuple[float, float]:
    """Coefficients ``(coef_xt, coef_x0)`` of the Gaussian posterior mean at step ``t``."""
    s.check_t(t)
    i = int(t) - 1
    a, ab, ab_prev = s.alphas[i], s.alpha_bars[i], s.alpha_bar_prev[i]
    coef_xt = np.sqrt(a) * (1.0 - ab_prev) / (1.0 - ab)
    coef_x0 = np.sqrt(ab_prev) * (1.0 - a) / (1.0 - ab)
    return float(coef_xt), float(coef_x0)
