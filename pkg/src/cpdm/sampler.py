"""Ancestral sampling conditioned on a raw image."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .diffusion import mean_from_eps
from .network import CPDMNet, predict_noise
from .schedule import NoiseSchedule


class ScheduleMismatchError(ValueError):
    pass


class NonFiniteSampleError(RuntimeError):
    def __init__(self, t: int):
        self.t = t
        super().__init__(f"non-finite values in sampler state at t={t}")


@dataclass(frozen=True)
class SampleConfig:
    seed: int = 0
    T: int = 1000
    record_trajectory: bool = False
    trajectory_every: int = 1


@dataclass
class SampleResult:
    x0: torch.Tensor
    trajectory: dict[int, torch.Tensor] = field(default_factory=dict)  # t -> x_t
    noise_steps: list[int] = field(default_factory=list)  # steps where z was drawn


def reverse_step(
    model: CPDMNet,
    xt: torch.Tensor,
    t: int,
    y0: torch.Tensor,
    z: torch.Tensor,
    s: NoiseSchedule,
    eps_hat: torch.Tensor | None = None,
) -> torch.Tensor:
    """x_{t-1} from x_t. ``eps_hat`` overrides the network prediction when given."""
    s.check_t(t)
    if xt.shape != y0.shape or z.shape != xt.shape:
        raise ValueError("x_t, y0 and z must share a shape")
    if eps_hat is None:
        diff = y0 - xt if model.cfg.use_difference_condition else None
        eps_hat = predict_noise(model, xt, t, y0, diff)
    mean = mean_from_eps(xt, t, eps_hat, s)
    if t == 1:
        return mean
    return mean + s.at("posterior_variances", t) ** 0.5 * z


@torch.no_grad()
def run_sampler(model: CPDMNet, cfg: SampleConfig, y0: torch.Tensor, s: NoiseSchedule) -> SampleResult:
    if cfg.T != s.T:
        raise ScheduleMismatchError(f"sampler T={cfg.T} but schedule has T={s.T}")
    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(int(cfg.seed))
    xt = torch.randn(y0.shape, generator=gen, dtype=y0.dtype)
    result = SampleResult(xt)
    if cfg.record_trajectory:
        result.trajectory[s.T] = xt.clone()
    try:
        for t in range(s.T, 0, -1):
            if t > 1:
                z = torch.randn(y0.shape, generator=gen, dtype=y0.dtype)
                result.noise_steps.append(t)
            else:
                z = torch.zeros_like(y0)
            xt = reverse_step(model, xt, t, y0, z, s)
            if not torch.isfinite(xt).all():
                raise NonFiniteSampleError(t)
            if cfg.record_trajectory and ((t - 1) % cfg.trajectory_every == 0):
                result.trajectory[t - 1] = xt.clone()
    finally:
        model.train(was_training)
    result.x0 = xt
    return result


def sample(model: CPDMNet, cfg: SampleConfig, y0: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Enhanced image in model space for the raw batch ``y0``."""
    return run_sampler(model, cfg, y0, s).x0
