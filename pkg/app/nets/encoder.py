"""BlindQE - Prior and Condition Encoders"""
from typing import Sequence

import torch
import torch.nn as nn

from app.errors import ShapeMismatchError
from app.models import QP_MAX
from app.nets.blocks import check_divisible, check_finite


def compose_encoder_input(gt: torch.Tensor, img: torch.Tensor, qpmap: torch.Tensor) -> torch.Tensor:
    """
    Stack the encoder input: channel 0 is the compressed plane, channel 1 is
    GT plus the normalised QP map (left unclamped).

    All inputs are (B, 1, H, W).
    """
    if not gt.shape == img.shape == qpmap.shape:
        raise ShapeMismatchError(
            f"Encoder planes disagree: gt {tuple(gt.shape)}, img {tuple(img.shape)}, "
            f"qpmap {tuple(qpmap.shape)}"
        )
    return torch.cat([img, gt + qpmap], dim=1)


def qp_planes(qps: Sequence[int] | torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Constant qp/51 planes, one per batch row, shaped like ``like``."""
    qps = torch.as_tensor(qps, dtype=like.dtype, device=like.device)
    return (qps / QP_MAX).view(-1, 1, 1, 1).expand_as(like).contiguous()


class FeatureEncoder(nn.Module):
    """
    Pixel-unshuffle, then conv + max-pool stages with growing width, global
    average pooling and one linear layer. The output length never depends on
    the input size.
    """

    def __init__(
        self,
        in_channels: int,
        out_dim: int,
        base_width: int = 32,
        stages: int = 3,
        shuffle_factor: int = 2,
        negative_slope: float = 0.1
    ):
        super().__init__()
        self.out_dim = out_dim
        self.size_multiple = shuffle_factor * 2 ** stages
        self.shuffle = nn.PixelUnshuffle(shuffle_factor)

        channels = in_channels * shuffle_factor ** 2
        self.stages = nn.ModuleList()
        for i in range(stages):
            width = base_width * 2 ** i
            self.stages.append(nn.Sequential(
                nn.Conv2d(channels, width, kernel_size=3, padding=1),
                nn.LeakyReLU(negative_slope),
                nn.MaxPool2d(2),
            ))
            channels = width

        self.pool = nn.AdaptiveAvgPool2d(1)
        self.linear = nn.Linear(channels, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_divisible(x, self.size_multiple, type(self).__name__)
        h = self.shuffle(x)
        for i, stage in enumerate(self.stages):
            h = check_finite(stage(h), f"stage{i}")
        return check_finite(self.linear(self.pool(h).flatten(1)), "linear")


class PriorEncoder(FeatureEncoder):
    """Encodes (GT + QP map, compressed) into Z_enc. Used only during training."""

    def __init__(self, latent_dim: int, **kwargs):
        super().__init__(in_channels=2, out_dim=latent_dim, **kwargs)

    def encode(self, gt: torch.Tensor, img: torch.Tensor, qpmap: torch.Tensor) -> torch.Tensor:
        return self(compose_encoder_input(gt, img, qpmap))
