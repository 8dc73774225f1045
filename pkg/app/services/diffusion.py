"""BlindQE - Conditional Diffusion over Feature Vectors"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import torch

from app.errors import NonFiniteError, ShapeMismatchError, TimestepError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Per-timestep forward-chain scalars, stored in double precision.

    Index ``t - 1`` of each vector holds the value for timestep ``t``.
    ``posterior_vars[0]`` is zero so the last reverse step adds no noise.
    """
    T: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor
    posterior_vars: torch.Tensor


@dataclass
class LatentState:
    """A latent vector (or batch of them) at timestep ``t``."""
    vector: torch.Tensor
    t: int


NoisePredictor = Callable[[LatentState, torch.Tensor], torch.Tensor]


def build_schedule(
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: str = "linear"
) -> NoiseSchedule:
    """
    Build a linear beta schedule and everything derived from it.

    Args:
        T: Number of timesteps (>= 1)
        beta_start: beta_1
        beta_end: beta_T
        kind: Only "linear" is supported

    Returns:
        NoiseSchedule with float64 vectors of length T
    """
    if kind != "linear":
        raise ValueError(f"Unsupported schedule kind '{kind}'")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"Betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )

    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    alpha_bars_prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bars[:-1]])
    posterior_vars = betas * (1.0 - alpha_bars_prev) / (1.0 - alpha_bars)

    return NoiseSchedule(
        T=T,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_vars=posterior_vars,
    )


def _check_timestep(t, schedule: NoiseSchedule) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.numel() == 0 or int(t.min()) < 1 or int(t.max()) > schedule.T:
        raise TimestepError(f"Timestep {t.tolist()} outside [1, {schedule.T}]")
    return t


def _check_same_shape(*tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for tensor in tensors[1:]:
        if tensor.shape != shape:
            raise ShapeMismatchError(f"Shape mismatch: {tuple(shape)} vs {tuple(tensor.shape)}")


def _per_sample(values: torch.Tensor, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Gather schedule values for t and broadcast against ``like`` (batch on dim 0)."""
    picked = values[t - 1].to(like.dtype)
    if picked.dim() == 0:
        return picked
    return picked.reshape(-1, *([1] * (like.dim() - 1)))


def q_sample(
    x0: torch.Tensor,
    t,
    eps: torch.Tensor,
    schedule: NoiseSchedule
) -> torch.Tensor:
    """
    Sample the forward chain at timestep t in closed form.

        x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps

    ``t`` is an int or a LongTensor with one timestep per batch row.
    """
    _check_same_shape(x0, eps)
    t = _check_timestep(t, schedule)
    alpha_bar = _per_sample(schedule.alpha_bars, t, x0)
    return alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * eps


def reverse_step(
    xt: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    z: torch.Tensor
) -> torch.Tensor:
    """
    One ancestral step x_t -> x_{t-1}.

        mu = (x_t - eps_hat * beta_t / sqrt(1 - alpha_bar_t)) / sqrt(alpha_t)
        x_{t-1} = mu + sigma_t * z

    sigma_1 is zero, so the final step returns the mean.
    """
    _check_same_shape(xt, eps_hat, z)
    t = int(_check_timestep(t, schedule))

    beta = float(schedule.betas[t - 1])
    alpha = float(schedule.alphas[t - 1])
    alpha_bar = float(schedule.alpha_bars[t - 1])
    sigma = float(schedule.posterior_vars[t - 1]) ** 0.5

    mean = (xt - eps_hat * (beta / (1.0 - alpha_bar) ** 0.5)) / alpha ** 0.5
    if t == 1:
        return mean
    return mean + sigma * z


def noise_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """
    Squared L2 distance between true and predicted noise.

    For a single vector this is ||eps - eps_hat||^2; for a (B, d) batch it is the
    batch mean of the per-sample squared norms.
    """
    _check_same_shape(eps, eps_hat)
    per_sample = (eps - eps_hat).pow(2).sum(dim=-1)
    return per_sample if per_sample.dim() == 0 else per_sample.mean()


def sample_timesteps(n: int, T: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Draw n timesteps uniformly from [1, T]."""
    return torch.randint(1, T + 1, (n,), generator=generator)


@torch.no_grad()
def sample_feature(
    cond: torch.Tensor,
    predictor: NoisePredictor,
    schedule: NoiseSchedule,
    seed: int,
    latent_dim: Optional[int] = None,
    stochastic: bool = True
) -> torch.Tensor:
    """
    Run the full reverse chain from seeded Gaussian noise.

    Args:
        cond: Condition vector(s), shape (d_c,) or (B, d_c)
        predictor: Callable (LatentState, cond) -> predicted noise
        schedule: Noise schedule
        seed: Seed for x_T and every injected draw
        latent_dim: Length of the latent; defaults to the condition length
        stochastic: When False every injected draw is zero

    Returns:
        Estimated feature vector(s) with the batch layout of ``cond``
    """
    latent_dim = latent_dim or cond.shape[-1]
    shape = (*cond.shape[:-1], latent_dim)
    generator = torch.Generator().manual_seed(seed)
    logger.debug(f"Sampling feature of shape {shape} over {schedule.T} steps (seed={seed})")

    x = torch.randn(shape, generator=generator, dtype=cond.dtype).to(cond.device)
    for t in range(schedule.T, 0, -1):
        eps_hat = predictor(LatentState(vector=x, t=t), cond)
        if eps_hat.shape != x.shape:
            raise ShapeMismatchError(
                f"Predictor returned shape {tuple(eps_hat.shape)} at t={t}, expected {tuple(x.shape)}"
            )
        if not torch.isfinite(eps_hat).all():
            raise NonFiniteError(f"Predictor produced non-finite values at timestep t={t}")

        z = torch.randn(shape, generator=generator, dtype=cond.dtype).to(cond.device)
        if not stochastic:
            z = torch.zeros_like(z)
        x = reverse_step(x, eps_hat, t, schedule, z)

    return x
