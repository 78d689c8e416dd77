"""Forward noising and closed-form reverse-step quantities.

Math ops work on plain ``torch.Tensor`` batches in model space ``[-1, 1]``
with a per-element timestep vector ``t`` of shape ``[B]`` (1-based).
Clamping happens only when converting back to metric space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import torch

from .schedule import NoiseSchedule

Space = Literal["model", "metric"]


class SpaceError(ValueError):
    pass


@dataclass(frozen=True)
class ImageTensor:
    """A ``B x C x H x W`` batch tagged with its value convention."""

    data: torch.Tensor
    space: Space

    def __post_init__(self):
        if self.space not in ("model", "metric"):
            raise SpaceError(f"unknown space {self.space!r}")
        if not torch.isfinite(self.data).all():
            raise ValueError("image tensor contains non-finite values")


def to_model_space(img: ImageTensor) -> ImageTensor:
    if img.space != "metric":
        raise SpaceError(f"to_model_space expects a metric-space image, got {img.space}")
    return ImageTensor(img.data * 2.0 - 1.0, "model")


def to_metric_space(img: ImageTensor) -> ImageTensor:
    if img.space != "model":
        raise SpaceError(f"to_metric_space expects a model-space image, got {img.space}")
    return ImageTensor(((img.data + 1.0) * 0.5).clamp(0.0, 1.0), "metric")


def _as_timesteps(t, batch: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.numel() == 1 and batch != 1:
        t = t.expand(batch)
    if t.numel() != batch:
        raise ValueError(f"expected {batch} timesteps, got {t.numel()}")
    return t


def _check_shapes(*tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for other in tensors[1:]:
        if other.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(other.shape)}")


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    _check_shapes(x0, eps)
    t = _as_timesteps(t, x0.shape[0])
    ab = s.gather("alpha_bars", t, torch.float64)
    return ab.sqrt().to(x0.dtype) * x0 + (1.0 - ab).sqrt().to(x0.dtype) * eps


def q_posterior_mean(x0: torch.Tensor, xt: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    _check_shapes(x0, xt)
    t = _as_timesteps(t, x0.shape[0])
    a = s.gather("alphas", t, torch.float64)
    ab = s.gather("alpha_bars", t, torch.float64)
    ab_prev = s.gather("alpha_bar_prev", t, torch.float64)
    coef_xt = (a.sqrt() * (1.0 - ab_prev) / (1.0 - ab)).to(xt.dtype)
    coef_x0 = (ab_prev.sqrt() * (1.0 - a) / (1.0 - ab)).to(x0.dtype)
    return coef_xt * xt + coef_x0 * x0


def mean_from_eps(xt: torch.Tensor, t, eps_hat: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Reverse-step mean expressed through a noise estimate."""
    _check_shapes(xt, eps_hat)
    t = _as_timesteps(t, xt.shape[0])
    a = s.gather("alphas", t, torch.float64)
    ab = s.gather("alpha_bars", t, torch.float64)
    eps_coef = ((1.0 - a) / (1.0 - ab).sqrt()).to(xt.dtype)
    inv_sqrt_a = (1.0 / a.sqrt()).to(xt.dtype)
    return inv_sqrt_a * (xt - eps_coef * eps_hat)
