import math

import numpy as np
import pytest
import torch

from cpdm.diffusion import (
    ImageTensor,
    SpaceError,
    mean_from_eps,
    q_posterior_mean,
    q_sample,
    to_metric_space,
    to_model_space,
)
from cpdm.schedule import ScheduleError, make_linear_schedule

S2 = make_linear_schedule(2, 0.1, 0.2)
DEFAULT = make_linear_schedule(1000, 1e-4, 0.02)


def scalar(v):
    return torch.full((1, 1, 1, 1), float(v), dtype=torch.float64)


def test_q_sample_scalar():
    xt = q_sample(scalar(1), [2], scalar(1), S2)
    assert xt.item() == pytest.approx(math.sqrt(0.72) + math.sqrt(0.28), abs=1e-12)
    assert xt.item() == pytest.approx(1.377678, abs=1e-6)


def test_q_sample_limits():
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(3, 3, 4, 4, generator=g)
    eps = torch.randn(3, 3, 4, 4, generator=g)
    t = torch.tensor([1, 500, 1000])
    ab = torch.tensor(DEFAULT.alpha_bars[[0, 499, 999]], dtype=torch.float32).view(-1, 1, 1, 1)
    torch.testing.assert_close(q_sample(x0, t, torch.zeros_like(x0), DEFAULT), ab.sqrt() * x0)
    torch.testing.assert_close(q_sample(torch.zeros_like(x0), t, eps, DEFAULT), (1 - ab).sqrt() * eps)


def test_q_posterior_mean_scalar():
    out = q_posterior_mean(scalar(1), scalar(1.377678), [2], S2)
    assert out.item() == pytest.approx(0.319438 * 1.377678 + 0.677631, abs=2e-6)
    assert out.item() == pytest.approx(1.117714, abs=1e-6)


def test_q_posterior_mean_t1_returns_x0():
    x0 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    xt = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    assert torch.equal(q_posterior_mean(x0, xt, [1, 1], DEFAULT), x0)


def test_q_posterior_mean_zero():
    z = torch.zeros(2, 3, 4, 4)
    assert torch.equal(q_posterior_mean(z, z, [5, 7], DEFAULT), z)


def test_mean_from_eps_scalar():
    out = mean_from_eps(scalar(1.377678), [2], scalar(1), S2)
    expected = (1.377678 - 0.2 / math.sqrt(0.28)) / math.sqrt(0.8)
    assert out.item() == pytest.approx(expected, abs=1e-12)
    assert out.item() == pytest.approx(1.117714, abs=1e-6)


def test_mean_from_eps_zero_prediction():
    xt = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    out = mean_from_eps(xt, [10, 900], torch.zeros_like(xt), DEFAULT)
    a = torch.tensor(DEFAULT.alphas[[9, 899]], dtype=torch.float64).view(-1, 1, 1, 1)
    torch.testing.assert_close(out, xt / a.sqrt())


def test_noise_form_matches_posterior_form():
    rng = np.random.default_rng(11)
    n = 1000
    x0 = torch.from_numpy(rng.normal(size=(n, 1, 1, 1)))
    eps = torch.from_numpy(rng.normal(size=(n, 1, 1, 1)))
    t = torch.from_numpy(rng.integers(1, 1001, size=n))
    xt = q_sample(x0, t, eps, DEFAULT)
    a = mean_from_eps(xt, t, eps, DEFAULT)
    b = q_posterior_mean(x0, xt, t, DEFAULT)
    rel = ((a - b).abs() / b.abs().clamp_min(1e-12)).flatten()
    assert float(rel.max()) < 1e-5


def test_shape_mismatch():
    a, b = torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5)
    with pytest.raises(ValueError):
        q_sample(a, [1], b, DEFAULT)
    with pytest.raises(ValueError):
        q_posterior_mean(a, b, [1], DEFAULT)
    with pytest.raises(ValueError):
        mean_from_eps(a, [1], b, DEFAULT)


def test_timestep_out_of_range():
    with pytest.raises(ScheduleError):
        q_sample(torch.zeros(1, 3, 2, 2), [3], torch.zeros(1, 3, 2, 2), S2)
    with pytest.raises(ScheduleError):
        mean_from_eps(torch.zeros(1, 3, 2, 2), [0], torch.zeros(1, 3, 2, 2), S2)


def test_pure_and_deterministic():
    x0 = torch.randn(4, 3, 8, 8)
    eps = torch.randn(4, 3, 8, 8)
    t = torch.tensor([1, 2, 3, 4])
    x0_copy = x0.clone()
    a = q_sample(x0, t, eps, DEFAULT)
    b = q_sample(x0, t, eps, DEFAULT)
    assert torch.equal(a, b)
    assert torch.equal(x0, x0_copy)


@pytest.mark.parametrize("x0_value,t", [(0.5, 10), (-0.8, 300), (1.0, 900)])
def test_forward_marginal_statistics(x0_value, t):
    n = 10_000
    g = torch.Generator().manual_seed(t)
    eps = torch.randn(n, 1, 1, 1, generator=g, dtype=torch.float64)
    x0 = torch.full((n, 1, 1, 1), x0_value, dtype=torch.float64)
    xt = q_sample(x0, torch.full((n,), t), eps, DEFAULT).flatten()
    ab = DEFAULT.alpha_bars[t - 1]
    assert abs(float(xt.mean()) - math.sqrt(ab) * x0_value) < 4 / math.sqrt(n)
    assert float(xt.var()) == pytest.approx(1 - ab, rel=0.10)


# -- space conversions -------------------------------------------------------


def test_space_endpoints():
    m = to_model_space(ImageTensor(torch.tensor([0.0, 0.5, 1.0]).view(1, 3, 1, 1), "metric"))
    assert m.space == "model"
    assert m.data.flatten().tolist() == [-1.0, 0.0, 1.0]


def test_metric_clamps_overshoot():
    out = to_metric_space(ImageTensor(torch.tensor([1.2, -3.0, 0.0]).view(1, 3, 1, 1), "model"))
    assert out.data.flatten().tolist() == [1.0, 0.0, 0.5]


def test_round_trip():
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    back = to_metric_space(to_model_space(ImageTensor(x, "metric")))
    assert float((back.data - x).abs().max()) < 1e-7


def test_wrong_space_tag():
    with pytest.raises(SpaceError):
        to_model_space(ImageTensor(torch.zeros(1, 3, 1, 1), "model"))
    with pytest.raises(SpaceError):
        to_metric_space(ImageTensor(torch.zeros(1, 3, 1, 1), "metric"))


def test_image_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        ImageTensor(torch.tensor([float("nan")]), "model")
