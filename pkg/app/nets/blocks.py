"""BlindQE - Shared Network Blocks"""
import torch
import torch.nn as nn

from app.errors import NonFiniteError, ShapeMismatchError


def check_finite(tensor: torch.Tensor, layer_name: str) -> torch.Tensor:
    """Abort with the layer name when an activation holds NaN or Inf."""
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(f"Non-finite activation after layer '{layer_name}'")
    return tensor


def check_divisible(x: torch.Tensor, multiple: int, network: str) -> None:
    height, width = x.shape[-2:]
    if height % multiple or width % multiple:
        raise ShapeMismatchError(
            f"{network} needs spatial dims divisible by {multiple}, got {height}x{width}"
        )


class ResidualUnit(nn.Module):
    """conv -> act -> conv with an identity (or 1x1) skip, then act."""

    def __init__(self, in_channels: int, out_channels: int, negative_slope: float = 0.1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1)
        self.act = nn.LeakyReLU(negative_slope)
        if in_channels == out_channels:
            self.skip = nn.Identity()
        else:
            self.skip = nn.Conv2d(in_channels, out_channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.conv2(self.act(self.conv1(x))) + self.skip(x))
