"""Noise-prediction training loop with per-role, per-step seeded randomness.

Every random draw is a pure function of ``(seed, role, step)``, so a run
resumed from a checkpoint sees exactly the batches, timesteps and noise the
uninterrupted run would have seen.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, restore_optimizer, save_checkpoint
from .data import PairedSample
from .diffusion import q_sample
from .network import CPDMNet, ModelConfig, init_parameters, predict_noise
from .schedule import NoiseSchedule, make_linear_schedule

log = logging.getLogger(__name__)

ROLE_ORDER, ROLE_T, ROLE_EPS = 0, 1, 2
LOG_COLUMNS = ("step", "loss", "grad_norm", "wall_time_ms")


class NonFiniteLossError(RuntimeError):
    def __init__(self, step, t, ids):
        self.step, self.t, self.ids = step, list(t), list(ids)
        super().__init__(f"non-finite loss at step {step}; t={self.t}; ids={self.ids}")


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 1000
    batch_size: int = 16
    learning_rate: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 500
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.batch_size < 1 or self.checkpoint_every < 1 or self.T < 1:
            raise ValueError("batch_size, checkpoint_every and T must be positive")
        if not 0.0 <= self.learning_rate < 1.0:
            raise ValueError("learning_rate must lie in [0, 1)")

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class TrainStepReport:
    step: int
    loss: float
    grad_norm: float
    wall_time_ms: float


def _generator(seed: int, role: int, index: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, role, index]).generate_state(2, dtype=np.uint64)
    return torch.Generator().manual_seed(int(state[0] >> np.uint64(1)))


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> list[int]:
    """Indices for 1-based ``step``, walking a fresh permutation per epoch."""
    out = []
    perms = {}
    for pos in range((step - 1) * batch_size, step * batch_size):
        epoch, offset = divmod(pos, n)
        if epoch not in perms:
            perms[epoch] = torch.randperm(n, generator=_generator(seed, ROLE_ORDER, epoch))
        out.append(int(perms[epoch][offset]))
    return out


def draw_timesteps(batch: int, T: int, seed: int, step: int) -> torch.Tensor:
    return torch.randint(1, T + 1, (batch,), generator=_generator(seed, ROLE_T, step))


def draw_noise(shape, seed: int, step: int) -> torch.Tensor:
    return torch.randn(shape, generator=_generator(seed, ROLE_EPS, step))


def noise_prediction_loss(model: CPDMNet, x0, y0, t, eps, schedule: NoiseSchedule) -> torch.Tensor:
    xt = q_sample(x0, t, eps, schedule)
    diff = y0 - xt if model.cfg.use_difference_condition else None
    eps_hat = predict_noise(model, xt, t, y0, diff)
    return torch.mean((eps - eps_hat) ** 2)


def make_optimizer(model: CPDMNet, learning_rate: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=learning_rate)


def train_step(
    model: CPDMNet,
    optimizer: torch.optim.Optimizer,
    x0: torch.Tensor,
    y0: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
    *,
    step: int = 0,
    ids=(),
) -> TrainStepReport:
    """One optimizer step on the noise-prediction loss; updates ``model`` in place."""
    start = time.perf_counter()
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = noise_prediction_loss(model, x0, y0, t, eps, schedule)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(step, t.tolist(), ids)
    loss.backward()
    grads = [p.grad for p in model.parameters() if p.grad is not None]
    grad_norm = torch.linalg.vector_norm(torch.stack([g.norm() for g in grads])).item() if grads else 0.0
    optimizer.step()
    return TrainStepReport(step, loss.item(), grad_norm, (time.perf_counter() - start) * 1000.0)


def train_loop(
    dataset: list[PairedSample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    checkpoint_dir,
    *,
    log_path=None,
    resume_from=None,
    extra_manifest: dict | None = None,
    on_step=None,
) -> CPDMNet:
    """Run ``train_cfg.total_steps`` steps, checkpointing periodically and at the end.

    Periodic checkpoints go to ``<dir>/step_XXXXXXX``; the final one to ``<dir>/final``.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    schedule = train_cfg.schedule()
    extra = {
        "schedule": {"T": train_cfg.T, "beta_start": train_cfg.beta_start, "beta_end": train_cfg.beta_end},
        "train_config": asdict(train_cfg),
        "image_size": list(dataset[0].x0.shape[-2:]),
        **(extra_manifest or {}),
    }

    if resume_from is not None:
        model, manifest = load_checkpoint(resume_from)
        if model.cfg != model_cfg:
            raise ValueError("resume checkpoint was trained with a different model config")
        if manifest.get("schedule", {}).get("T") != train_cfg.T:
            raise ValueError("resume checkpoint was trained with a different T")
        optimizer = make_optimizer(model, train_cfg.learning_rate)
        restore_optimizer(resume_from, optimizer, model)
        for group in optimizer.param_groups:
            group["lr"] = train_cfg.learning_rate
        start_step = int(manifest["step"])
    else:
        model = init_parameters(model_cfg, train_cfg.seed)
        optimizer = make_optimizer(model, train_cfg.learning_rate)
        start_step = 0

    writer = None
    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = resume_from is None or not log_path.exists()
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_file)
        if fresh:
            writer.writerow(LOG_COLUMNS)

    n = len(dataset)
    try:
        for step in range(start_step + 1, train_cfg.total_steps + 1):
            idx = batch_indices(n, train_cfg.batch_size, train_cfg.seed, step)
            batch = [dataset[i] for i in idx]
            x0 = torch.stack([s.x0 for s in batch])
            y0 = torch.stack([s.y0 for s in batch])
            t = draw_timesteps(len(batch), train_cfg.T, train_cfg.seed, step)
            eps = draw_noise(x0.shape, train_cfg.seed, step)
            report = train_step(
                model, optimizer, x0, y0, t, eps, schedule, step=step, ids=[s.id for s in batch]
            )
            if writer is not None:
                writer.writerow(
                    [report.step, f"{report.loss:.8g}", f"{report.grad_norm:.8g}", f"{report.wall_time_ms:.3f}"]
                )
            if on_step is not None:
                on_step(report)
            if step % 100 == 0:
                log.info("step %d loss %.5f grad_norm %.4f", step, report.loss, report.grad_norm)
            if step % train_cfg.checkpoint_every == 0 and step < train_cfg.total_steps:
                save_checkpoint(
                    checkpoint_dir / f"step_{step:07d}", model,
                    step=step, seed=train_cfg.seed, optimizer=optimizer, extra=extra,
                )
    finally:
        if log_file is not None:
            log_file.close()

    final_step = max(start_step, train_cfg.total_steps)
    save_checkpoint(
        checkpoint_dir / "final", model,
        step=final_step, seed=train_cfg.seed, optimizer=optimizer, extra=extra,
    )
    return model


def read_log(path) -> list[TrainStepReport]:
    with open(path, newline="") as fh:
        return [
            TrainStepReport(int(r["step"]), float(r["loss"]), float(r["grad_norm"]), float(r["wall_time_ms"]))
            for r in csv.DictReader(fh)
        ]


def mean_loss(reports, start: int, stop: int) -> float:
    window = [r.loss for r in reports[start:stop]]
    return math.fsum(window) / len(window)
