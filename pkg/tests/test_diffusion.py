"""BlindQE - Diffusion Core Tests"""
import math

import pytest
import torch

from app.errors import NonFiniteError, ShapeMismatchError, TimestepError
from app.services.diffusion import (
    build_schedule,
    noise_loss,
    q_sample,
    reverse_step,
    sample_feature,
    sample_timesteps,
)


def oracle_predictor(z0, schedule):
    """Returns the exact noise that produced x_t from z0."""
    def predict(state, cond):
        alpha_bar = float(schedule.alpha_bars[state.t - 1])
        return (state.vector - math.sqrt(alpha_bar) * z0) / math.sqrt(1.0 - alpha_bar)
    return predict


def test_schedule_shapes_and_precision():
    schedule = build_schedule(100)
    for values in (schedule.betas, schedule.alphas, schedule.alpha_bars, schedule.posterior_vars):
        assert values.shape == (100,)
        assert values.dtype == torch.float64
    assert schedule.betas[0].item() == pytest.approx(1e-4)
    assert schedule.betas[-1].item() == pytest.approx(0.02)
    assert schedule.posterior_vars[0].item() == 0.0
    assert torch.all(schedule.alpha_bars[1:] < schedule.alpha_bars[:-1])


def test_schedule_posterior_variance_closed_form():
    schedule = build_schedule(10)
    t = 4
    expected = (
        schedule.betas[t - 1]
        * (1 - schedule.alpha_bars[t - 2])
        / (1 - schedule.alpha_bars[t - 1])
    )
    assert schedule.posterior_vars[t - 1].item() == pytest.approx(expected.item(), rel=1e-12)


@pytest.mark.parametrize("kwargs", [
    dict(T=0),
    dict(T=10, beta_start=0.0),
    dict(T=10, beta_start=0.1, beta_end=0.01),
    dict(T=10, kind="cosine"),
])
def test_schedule_rejects_bad_arguments(kwargs):
    with pytest.raises(ValueError):
        build_schedule(**kwargs)


@pytest.mark.parametrize("T", [1, 10, 100, 1000])
def test_schedule_matches_running_product(T):
    schedule = build_schedule(T)
    assert torch.all((schedule.betas > 0) & (schedule.betas < 1))
    assert torch.equal(schedule.alphas, 1.0 - schedule.betas)
    assert torch.all((schedule.alpha_bars > 0) & (schedule.alpha_bars < 1))
    assert torch.all(schedule.alpha_bars[1:] < schedule.alpha_bars[:-1])

    running = 1.0
    for t in range(T):
        running *= float(schedule.alphas[t])
        assert float(schedule.alpha_bars[t]) == pytest.approx(running, rel=1e-12)


def test_schedule_small_examples():
    single = build_schedule(1, beta_start=0.1, beta_end=0.1)
    assert single.alpha_bars.tolist() == pytest.approx([0.9], abs=1e-15)
    assert single.posterior_vars.tolist() == [0.0]

    pair = build_schedule(2, beta_start=0.1, beta_end=0.2)
    assert pair.betas.tolist() == pytest.approx([0.1, 0.2], abs=1e-15)
    assert pair.alpha_bars.tolist() == pytest.approx([0.9, 0.72], rel=1e-12)


def test_q_sample_closed_form():
    schedule = build_schedule(10)
    x0 = torch.zeros(4, dtype=torch.float64)
    eps = torch.ones(4, dtype=torch.float64)
    xt = q_sample(x0, 3, eps, schedule)
    expected = math.sqrt(1.0 - schedule.alpha_bars[2].item())
    assert torch.allclose(xt, torch.full((4,), expected, dtype=torch.float64))


def test_q_sample_per_row_timesteps():
    schedule = build_schedule(10)
    x0 = torch.ones(3, 5, dtype=torch.float64)
    eps = torch.zeros(3, 5, dtype=torch.float64)
    t = torch.tensor([1, 5, 10])
    xt = q_sample(x0, t, eps, schedule)
    for row, step in enumerate(t.tolist()):
        assert torch.allclose(xt[row], schedule.alpha_bars[step - 1].sqrt().expand(5))


def test_q_sample_degenerate_inputs():
    schedule = build_schedule(10)
    x0 = torch.randn(6, dtype=torch.float64)
    eps = torch.randn(6, dtype=torch.float64)
    zeros = torch.zeros(6, dtype=torch.float64)
    alpha_bar = schedule.alpha_bars[6]
    assert torch.equal(q_sample(x0, 7, zeros, schedule), alpha_bar.sqrt() * x0)
    assert torch.allclose(q_sample(zeros, 7, eps, schedule), (1.0 - alpha_bar).sqrt() * eps, rtol=1e-14, atol=0)


def test_q_sample_moments():
    schedule = build_schedule(100)
    t = 50
    x0 = torch.tensor([1.0, -2.0, 1.5, 3.0], dtype=torch.float64)
    n = 400_000
    generator = torch.Generator().manual_seed(0)
    eps = torch.randn(n, 4, generator=generator, dtype=torch.float64)
    xt = q_sample(x0.expand(n, 4), t, eps, schedule)

    alpha_bar = float(schedule.alpha_bars[t - 1])
    assert xt.mean(dim=0).tolist() == pytest.approx((math.sqrt(alpha_bar) * x0).tolist(), rel=0.01)
    assert xt.var(dim=0).tolist() == pytest.approx([1.0 - alpha_bar] * 4, rel=0.01)


@pytest.mark.parametrize("t", [0, 11, -1])
def test_timestep_out_of_range(t):
    schedule = build_schedule(10)
    x = torch.zeros(3)
    with pytest.raises(TimestepError):
        q_sample(x, t, x, schedule)
    with pytest.raises(TimestepError):
        reverse_step(x, x, t, schedule, x)


def test_shape_mismatch():
    schedule = build_schedule(10)
    with pytest.raises(ShapeMismatchError):
        q_sample(torch.zeros(3), 1, torch.zeros(4), schedule)
    with pytest.raises(ShapeMismatchError):
        noise_loss(torch.zeros(3), torch.zeros(2))


def test_last_reverse_step_ignores_noise():
    schedule = build_schedule(10)
    xt = torch.randn(6, dtype=torch.float64)
    eps_hat = torch.randn(6, dtype=torch.float64)
    first = reverse_step(xt, eps_hat, 1, schedule, torch.randn(6, dtype=torch.float64))
    second = reverse_step(xt, eps_hat, 1, schedule, torch.randn(6, dtype=torch.float64))
    assert torch.equal(first, second)


def test_reverse_step_with_oracle_noise_recovers_x0_at_t1():
    schedule = build_schedule(10)
    x0 = torch.randn(8, dtype=torch.float64)
    eps = torch.randn(8, dtype=torch.float64)
    x1 = q_sample(x0, 1, eps, schedule)
    recovered = reverse_step(x1, eps, 1, schedule, torch.zeros(8, dtype=torch.float64))
    assert torch.allclose(recovered, x0, atol=1e-10)


def test_reverse_step_mean_formula():
    schedule = build_schedule(10)
    xt = torch.randn(5, dtype=torch.float64)
    eps_hat = torch.randn(5, dtype=torch.float64)
    z = torch.randn(5, dtype=torch.float64)
    t = 6
    beta = schedule.betas[t - 1]
    alpha = schedule.alphas[t - 1]
    alpha_bar = schedule.alpha_bars[t - 1]
    mean = (xt - eps_hat * beta / (1 - alpha_bar).sqrt()) / alpha.sqrt()
    expected = mean + schedule.posterior_vars[t - 1].sqrt() * z
    assert torch.allclose(reverse_step(xt, eps_hat, t, schedule, z), expected, atol=1e-12)


def test_reverse_step_with_zero_noise_estimate():
    schedule = build_schedule(10)
    xt = torch.randn(5, dtype=torch.float64)
    zeros = torch.zeros(5, dtype=torch.float64)
    alpha = float(schedule.alphas[0])
    assert torch.allclose(reverse_step(xt, zeros, 1, schedule, zeros), xt / math.sqrt(alpha), rtol=1e-14, atol=0)


def test_planted_trajectory_is_recovered():
    worst, trials = 0.0, 0
    for T in (1, 2, 5, 10, 100):
        schedule = build_schedule(T)
        for d in (1, 8, 64):
            for trial in range(7):
                generator = torch.Generator().manual_seed(1000 * T + 10 * d + trial)
                x0 = torch.randn(d, generator=generator, dtype=torch.float64)
                eps = torch.randn(d, generator=generator, dtype=torch.float64)
                x = q_sample(x0, T, eps, schedule)
                for t in range(T, 0, -1):
                    alpha_bar = float(schedule.alpha_bars[t - 1])
                    eps_hat = (x - math.sqrt(alpha_bar) * x0) / math.sqrt(1.0 - alpha_bar)
                    x = reverse_step(x, eps_hat, t, schedule, torch.zeros_like(x))
                worst = max(worst, float((x - x0).norm() / x0.norm()))
                trials += 1
    assert trials >= 100
    assert worst <= 1e-6


def test_noise_loss_single_vector_and_batch():
    eps = torch.tensor([1.0, 2.0])
    assert noise_loss(eps, torch.zeros(2)).item() == pytest.approx(5.0)
    assert noise_loss(eps, eps).item() == 0.0

    batch = torch.tensor([[1.0, 0.0], [0.0, 3.0]])
    assert noise_loss(batch, torch.zeros(2, 2)).item() == pytest.approx((1.0 + 9.0) / 2)


def test_noise_loss_symmetry_and_loop_oracle():
    generator = torch.Generator().manual_seed(3)
    a = torch.randn(64, generator=generator, dtype=torch.float64)
    b = torch.randn(64, generator=generator, dtype=torch.float64)
    assert noise_loss(a, b).item() == noise_loss(b, a).item()

    naive = 0.0
    for i in range(64):
        naive += (float(a[i]) - float(b[i])) ** 2
    assert noise_loss(a, b).item() == pytest.approx(naive, abs=1e-12)

    zeros = torch.zeros(4, dtype=torch.float64)
    assert noise_loss(zeros, torch.ones(4, dtype=torch.float64)).item() == 4.0


def test_sample_timesteps_covers_every_step():
    T = 5
    generator = torch.Generator().manual_seed(0)
    draws = sample_timesteps(10 * T, T, generator)
    assert draws.min().item() >= 1
    assert draws.max().item() <= T
    assert set(draws.tolist()) == set(range(1, T + 1))


def test_sample_feature_is_seeded():
    schedule = build_schedule(8)
    cond = torch.randn(2, 4)

    def predictor(state, c):
        return 0.1 * state.vector + c.sum(dim=-1, keepdim=True) * 0.01

    first = sample_feature(cond, predictor, schedule, seed=3)
    second = sample_feature(cond, predictor, schedule, seed=3)
    other = sample_feature(cond, predictor, schedule, seed=4)
    assert first.shape == (2, 4)
    assert torch.equal(first, second)
    assert not torch.equal(first, other)


def test_sample_feature_with_oracle_returns_target():
    schedule = build_schedule(20)
    z0 = torch.randn(3, 6, dtype=torch.float64)
    cond = torch.zeros(3, 6, dtype=torch.float64)
    estimate = sample_feature(cond, oracle_predictor(z0, schedule), schedule, seed=11)
    assert torch.allclose(estimate, z0, atol=1e-8)


def test_sample_feature_latent_dim_differs_from_condition():
    schedule = build_schedule(4)
    cond = torch.randn(2, 3)
    out = sample_feature(cond, lambda state, c: torch.zeros_like(state.vector), schedule, 0, latent_dim=7)
    assert out.shape == (2, 7)


def test_sample_feature_rejects_bad_predictors():
    schedule = build_schedule(4)
    cond = torch.randn(1, 4)
    with pytest.raises(ShapeMismatchError):
        sample_feature(cond, lambda state, c: torch.zeros(1, 3), schedule, 0)
    with pytest.raises(NonFiniteError, match="t=4"):
        sample_feature(cond, lambda state, c: torch.full_like(state.vector, float("nan")), schedule, 0)
