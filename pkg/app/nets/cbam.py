"""BlindQE - Feature-Vector Conditioned CBAM"""
import torch
import torch.nn as nn

from app.errors import ShapeMismatchError


class ConditionedCBAM(nn.Module):
    """
    Channel then spatial attention, both steered by a feature vector Z.

        M_c = sigmoid(MLP(AvgPool F) + MLP(MaxPool F) + MLP_z(Z))
        M_s = sigmoid(conv7x7(cat(AvgPool_c F_c, MaxPool_c F_c, broadcast(proj(Z)))))
        F_sc = M_s * (M_c * F)

    Args:
        channels: Channel count C of the gated feature map
        latent_dim: Length d of Z
        kernel_size: Spatial attention kernel (odd)
    """

    def __init__(self, channels: int, latent_dim: int, kernel_size: int = 7):
        super().__init__()
        self.channels = channels
        self.latent_dim = latent_dim
        self.feature_mlp = nn.Linear(channels, channels)
        self.latent_mlp = nn.Linear(latent_dim, channels)
        self.latent_proj = nn.Linear(latent_dim, 1)
        self.spatial_conv = nn.Conv2d(3, 1, kernel_size, padding=kernel_size // 2)

    def _check(self, feature: torch.Tensor, z: torch.Tensor) -> None:
        if feature.dim() != 4 or feature.shape[1] != self.channels:
            raise ShapeMismatchError(
                f"CBAM expects {self.channels} channels, got shape {tuple(feature.shape)}"
            )
        if z.shape != (feature.shape[0], self.latent_dim):
            raise ShapeMismatchError(
                f"CBAM expects Z of shape ({feature.shape[0]}, {self.latent_dim}), got {tuple(z.shape)}"
            )

    def channel_gate(self, feature: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """Per-channel gate M_c of shape (B, C)."""
        self._check(feature, z)
        avg = feature.mean(dim=(2, 3))
        peak = feature.amax(dim=(2, 3))
        return torch.sigmoid(self.feature_mlp(avg) + self.feature_mlp(peak) + self.latent_mlp(z))

    def spatial_gate(self, feature: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """Per-pixel gate M_s of shape (B, 1, H, W)."""
        self._check(feature, z)
        avg = feature.mean(dim=1, keepdim=True)
        peak = feature.amax(dim=1, keepdim=True)
        latent_map = self.latent_proj(z).view(-1, 1, 1, 1).expand_as(avg)
        return torch.sigmoid(self.spatial_conv(torch.cat([avg, peak, latent_map], dim=1)))

    def forward(self, feature: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        gated = self.channel_gate(feature, z)[:, :, None, None] * feature
        return self.spatial_gate(gated, z) * gated
