import csv

import numpy as np
import pytest
import torch

from cpdm.checkpoint import load_checkpoint, read_manifest
from cpdm.data import DatasetManifest, DegradeParams, load_dataset, make_synthetic_dataset
from cpdm.network import ModelConfig, init_parameters
from cpdm.schedule import make_linear_schedule
from cpdm.trainer import (
    LOG_COLUMNS,
    NonFiniteLossError,
    TrainConfig,
    batch_indices,
    make_optimizer,
    mean_loss,
    noise_prediction_loss,
    read_log,
    train_loop,
    train_step,
)
from oracles import randomized_tiny_model

SMALL = ModelConfig(base_channels=8, channel_multipliers=(1, 2), blocks_per_level=2, time_embed_dim=32)
SCHED = make_linear_schedule(200, 1e-4, 0.02)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    make_synthetic_dataset(40, 16, DegradeParams(), 1, root)
    return load_dataset(DatasetManifest.read(root))


def batch(n=8, size=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.rand(n, 3, size, size, generator=g) * 2 - 1
    y0 = torch.rand(n, 3, size, size, generator=g) * 2 - 1
    t = torch.randint(1, SCHED.T + 1, (n,), generator=g)
    eps = torch.randn(n, 3, size, size, generator=g)
    return x0, y0, t, eps


def params_bytes(model):
    return [p.detach().numpy().tobytes() for p in model.parameters()]


def test_fresh_model_loss_is_noise_power():
    model = init_parameters(SMALL, 0)
    x0, y0, t, eps = batch(n=8, size=32)
    assert eps.numel() >= 10_000
    report = train_step(model, make_optimizer(model, 1e-4), x0, y0, t, eps, SCHED)
    assert report.loss == pytest.approx(1.0, abs=0.05)
    assert report.loss == pytest.approx(float((eps.double() ** 2).mean()), rel=1e-5)


class Oracle(torch.nn.Module):
    def __init__(self, eps):
        super().__init__()
        self.cfg = SMALL
        self.eps = eps

    def forward(self, xt, t, y0, diff=None):
        return self.eps


def test_perfect_predictor_has_zero_loss():
    x0, y0, t, eps = batch()
    assert noise_prediction_loss(Oracle(eps), x0, y0, t, eps, SCHED).item() == 0.0


def test_zero_learning_rate_keeps_parameters():
    model = randomized_tiny_model(cfg=SMALL).float()
    before = params_bytes(model)
    train_step(model, make_optimizer(model, 0.0), *batch(), SCHED)
    assert params_bytes(model) == before


def test_descent_direction():
    wins = 0
    for trial in range(100):
        model = randomized_tiny_model(seed=trial, cfg=SMALL)
        x0, y0, t, eps = (v.double() if v.is_floating_point() else v for v in batch(n=2, size=8, seed=trial))
        opt = torch.optim.Adam(model.parameters(), lr=1e-6)
        before = train_step(model, opt, x0, y0, t, eps, SCHED).loss
        after = noise_prediction_loss(model, x0, y0, t, eps, SCHED).item()
        wins += after <= before
    assert wins >= 95


def test_non_finite_loss_reports_context():
    model = init_parameters(SMALL, 0)
    x0, y0, t, eps = batch(n=2)
    x0[1, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as info:
        train_step(model, make_optimizer(model, 1e-4), x0, y0, t, eps, SCHED, step=7, ids=["a", "b"])
    assert info.value.step == 7 and info.value.ids == ["a", "b"] and info.value.t == t.tolist()


def test_batch_indices_cover_each_epoch():
    n, bs = 10, 4
    seen = [i for step in range(1, 6) for i in batch_indices(n, bs, seed=3, step=step)]
    assert sorted(seen[:10]) == list(range(10))
    assert sorted(seen[10:20]) == list(range(10))


def test_empty_dataset(tmp_path):
    with pytest.raises(ValueError):
        train_loop([], SMALL, TrainConfig(total_steps=1, T=10), tmp_path)


def test_zero_steps_writes_initial_checkpoint(tmp_path, toy):
    cfg = TrainConfig(total_steps=0, T=50, seed=4)
    model = train_loop(toy, SMALL, cfg, tmp_path, log_path=tmp_path / "log.csv")
    assert [p.name for p in tmp_path.iterdir() if p.is_dir()] == ["final"]
    loaded, manifest = load_checkpoint(tmp_path / "final")
    assert manifest["step"] == 0
    assert params_bytes(loaded) == params_bytes(init_parameters(SMALL, 4)) == params_bytes(model)


def test_log_format_and_periodic_checkpoints(tmp_path, toy):
    cfg = TrainConfig(total_steps=6, batch_size=4, T=50, checkpoint_every=2)
    train_loop(toy, SMALL, cfg, tmp_path, log_path=tmp_path / "log.csv")
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4, 5, 6]
    assert all(float(r[1]) >= 0 for r in rows[1:])
    dirs = sorted(p.name for p in tmp_path.iterdir() if p.is_dir())
    assert dirs == ["final", "step_0000002", "step_0000004"]
    assert read_manifest(tmp_path / "final")["schedule"]["T"] == 50


def test_training_is_bit_reproducible(tmp_path, toy):
    cfg = TrainConfig(total_steps=8, batch_size=4, T=50, seed=2, learning_rate=1e-3)
    train_loop(toy, SMALL, cfg, tmp_path / "a")
    train_loop(toy, SMALL, cfg, tmp_path / "b")
    for f in sorted((tmp_path / "a" / "final" / "params").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "final" / "params" / f.name).read_bytes()


def test_resume_matches_unbroken_run(tmp_path, toy):
    full = TrainConfig(total_steps=10, batch_size=4, T=50, seed=5, learning_rate=1e-3, checkpoint_every=6)
    train_loop(toy, SMALL, full, tmp_path / "full", log_path=tmp_path / "full.csv")
    train_loop(
        toy, SMALL, full, tmp_path / "resumed",
        resume_from=tmp_path / "full" / "step_0000006", log_path=tmp_path / "resumed.csv",
    )
    unbroken = {r.step: r.loss for r in read_log(tmp_path / "full.csv")}
    resumed = read_log(tmp_path / "resumed.csv")
    assert resumed[0].step == 7
    for r in resumed:
        assert r.loss == pytest.approx(unbroken[r.step], abs=1e-6)
    for f in sorted((tmp_path / "full" / "final" / "params").iterdir()):
        assert f.read_bytes() == (tmp_path / "resumed" / "final" / "params" / f.name).read_bytes()


def test_resume_rejects_other_config(tmp_path, toy):
    cfg = TrainConfig(total_steps=1, batch_size=2, T=50)
    train_loop(toy, SMALL, cfg, tmp_path / "a")
    other = ModelConfig(base_channels=4, channel_multipliers=(1, 2), blocks_per_level=2, time_embed_dim=32)
    with pytest.raises(ValueError):
        train_loop(toy, other, cfg, tmp_path / "b", resume_from=tmp_path / "a" / "final")


def test_loss_halves_on_toy_task(tmp_path, toy):
    cfg = TrainConfig(total_steps=500, batch_size=8, T=200, seed=0, learning_rate=1e-3, checkpoint_every=10_000)
    train_loop(toy, SMALL, cfg, tmp_path, log_path=tmp_path / "log.csv")
    reports = read_log(tmp_path / "log.csv")
    assert all(np.isfinite(r.loss) and r.loss >= 0 for r in reports)
    first, last = mean_loss(reports, 0, 50), mean_loss(reports, -50, None)
    assert last < 0.5 * first, (first, last)


@pytest.mark.parametrize("kw", [dict(total_steps=-1), dict(batch_size=0), dict(learning_rate=1.0), dict(T=0)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)
