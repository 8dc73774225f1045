"""BlindQE - Z-Conditioned UNet Decoder"""
import torch
import torch.nn as nn

from app.errors import ShapeMismatchError
from app.nets.blocks import ResidualUnit, check_divisible, check_finite
from app.nets.cbam import ConditionedCBAM


class _UpLevel(nn.Module):
    """Upsample, merge with the skip, gate with CBAM(Z), refine."""

    def __init__(self, in_channels: int, out_channels: int, latent_dim: int, negative_slope: float):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_channels, out_channels, kernel_size=2, stride=2)
        self.fuse = nn.Sequential(
            nn.Conv2d(out_channels * 2, out_channels, kernel_size=3, padding=1),
            nn.LeakyReLU(negative_slope),
        )
        self.cbam = ConditionedCBAM(out_channels, latent_dim)
        self.refine = ResidualUnit(out_channels, out_channels, negative_slope)

    def forward(self, x: torch.Tensor, skip: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        merged = self.fuse(torch.cat([self.up(x), skip], dim=1))
        return self.refine(self.cbam(merged, z))


class ConditionedUNet(nn.Module):
    """
    Residual UNet over a single luminance plane; every merge is gated by a
    CBAM conditioned on Z.

    The tail conv starts at zero, so a fresh decoder returns its input
    unchanged. With ``conditioned=False`` any Z is replaced by zeros.
    """

    def __init__(
        self,
        latent_dim: int,
        base_width: int = 32,
        depth: int = 3,
        negative_slope: float = 0.1,
        conditioned: bool = True
    ):
        super().__init__()
        self.latent_dim = latent_dim
        self.conditioned = conditioned
        self.size_multiple = 2 ** depth
        widths = [base_width * 2 ** i for i in range(depth + 1)]

        self.head = nn.Sequential(
            nn.Conv2d(1, widths[0], kernel_size=3, padding=1),
            nn.LeakyReLU(negative_slope),
        )
        self.down = nn.ModuleList()
        in_channels = widths[0]
        for width in widths[:-1]:
            self.down.append(ResidualUnit(in_channels, width, negative_slope))
            in_channels = width
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = ResidualUnit(widths[-2], widths[-1], negative_slope)
        self.up = nn.ModuleList(
            _UpLevel(widths[i + 1], widths[i], latent_dim, negative_slope)
            for i in reversed(range(depth))
        )
        self.tail = nn.Conv2d(widths[0], 1, kernel_size=3, padding=1)
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def residual(self, img: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """x_res for a (B, 1, H, W) compressed plane and (B, d) feature vectors."""
        check_divisible(img, self.size_multiple, type(self).__name__)
        if z.shape != (img.shape[0], self.latent_dim):
            raise ShapeMismatchError(
                f"Decoder expects Z of shape ({img.shape[0]}, {self.latent_dim}), got {tuple(z.shape)}"
            )
        if not self.conditioned:
            z = torch.zeros_like(z)

        h = self.head(img)
        skips = []
        for i, unit in enumerate(self.down):
            h = check_finite(unit(h), f"down{i}")
            skips.append(h)
            h = self.pool(h)
        h = check_finite(self.bottleneck(h), "bottleneck")
        for i, level in enumerate(self.up):
            h = check_finite(level(h, skips.pop(), z), f"up{i}")
        return check_finite(self.tail(h), "tail")

    def forward(self, img: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return img + self.residual(img, z)
