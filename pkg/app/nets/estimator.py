"""BlindQE - Diffusion Estimator and Direct Regressor"""
import math

import torch
import torch.nn as nn

from app.errors import ShapeMismatchError
from app.nets.blocks import check_finite
from app.nets.encoder import FeatureEncoder
from app.services.diffusion import LatentState, NoiseSchedule, sample_feature


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    embedding = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        embedding = torch.cat([embedding, torch.zeros_like(embedding[:, :1])], dim=1)
    return embedding


class NoisePredictor(nn.Module):
    """Four-layer MLP over cat(Z_t, C_vec, time embedding) predicting the noise."""

    def __init__(
        self,
        latent_dim: int,
        cond_dim: int,
        hidden_width: int = 512,
        time_embed_dim: int = 64,
        negative_slope: float = 0.1
    ):
        super().__init__()
        self.latent_dim = latent_dim
        self.cond_dim = cond_dim
        self.time_embed_dim = time_embed_dim
        self.net = nn.Sequential(
            nn.Linear(latent_dim + cond_dim + time_embed_dim, hidden_width),
            nn.LeakyReLU(negative_slope),
            nn.Linear(hidden_width, hidden_width),
            nn.LeakyReLU(negative_slope),
            nn.Linear(hidden_width, hidden_width),
            nn.LeakyReLU(negative_slope),
            nn.Linear(hidden_width, latent_dim),
        )

    def forward(self, z_t: torch.Tensor, c_vec: torch.Tensor, t) -> torch.Tensor:
        if z_t.shape[-1] != self.latent_dim or c_vec.shape[-1] != self.cond_dim:
            raise ShapeMismatchError(
                f"Noise predictor expects ({self.latent_dim}, {self.cond_dim}) inputs, "
                f"got {tuple(z_t.shape)} and {tuple(c_vec.shape)}"
            )
        t = torch.as_tensor(t, device=z_t.device).reshape(-1).expand(z_t.shape[0])
        embedding = timestep_embedding(t, self.time_embed_dim).to(z_t.dtype)
        eps_hat = self.net(torch.cat([z_t, c_vec, embedding], dim=1))
        return check_finite(eps_hat, "noise_predictor")


class Estimator(nn.Module):
    """Condition encoder plus noise predictor; estimates Z from the compressed plane alone."""

    def __init__(
        self,
        latent_dim: int,
        cond_dim: int,
        base_width: int = 32,
        stages: int = 3,
        shuffle_factor: int = 2,
        hidden_width: int = 512,
        time_embed_dim: int = 64,
        negative_slope: float = 0.1
    ):
        super().__init__()
        self.latent_dim = latent_dim
        self.condition_encoder = FeatureEncoder(
            in_channels=1,
            out_dim=cond_dim,
            base_width=base_width,
            stages=stages,
            shuffle_factor=shuffle_factor,
            negative_slope=negative_slope,
        )
        self.noise_predictor = NoisePredictor(
            latent_dim, cond_dim, hidden_width, time_embed_dim, negative_slope
        )

    def encode_condition(self, img: torch.Tensor) -> torch.Tensor:
        return self.condition_encoder(img)

    def predict_noise(self, z_t: torch.Tensor, c_vec: torch.Tensor, t) -> torch.Tensor:
        return self.noise_predictor(z_t, c_vec, t)

    @torch.no_grad()
    def estimate(
        self,
        img: torch.Tensor,
        schedule: NoiseSchedule,
        seed: int,
        stochastic: bool = True
    ) -> torch.Tensor:
        """Z_est for a batch of compressed planes via the full reverse chain."""
        c_vec = self.encode_condition(img)

        def predictor(state: LatentState, cond: torch.Tensor) -> torch.Tensor:
            return self.predict_noise(state.vector, cond, state.t)

        return sample_feature(
            c_vec, predictor, schedule, seed,
            latent_dim=self.latent_dim, stochastic=stochastic,
        )


class DirectRegressor(nn.Module):
    """Condition-encoder backbone with an MLP head regressing Z in one pass."""

    def __init__(
        self,
        latent_dim: int,
        cond_dim: int,
        base_width: int = 32,
        stages: int = 3,
        shuffle_factor: int = 2,
        hidden_width: int = 512,
        negative_slope: float = 0.1
    ):
        super().__init__()
        self.backbone = FeatureEncoder(
            in_channels=1,
            out_dim=cond_dim,
            base_width=base_width,
            stages=stages,
            shuffle_factor=shuffle_factor,
            negative_slope=negative_slope,
        )
        self.head = nn.Sequential(
            nn.Linear(cond_dim, hidden_width),
            nn.LeakyReLU(negative_slope),
            nn.Linear(hidden_width, latent_dim),
        )

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return check_finite(self.head(self.backbone(img)), "regressor_head")
