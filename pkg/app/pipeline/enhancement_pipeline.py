"""BlindQE - Inference Path (estimator + decoder)"""
import logging

import numpy as np
import torch

from app.errors import ShapeMismatchError
from app.models import Variant
from app.nets import ModelWeights

logger = logging.getLogger(__name__)


class EnhancementPipeline:
    """
    Enhances compressed luminance planes without knowing their QP.

    Only the compressed plane is consumed: the feature vector comes from the
    diffusion estimator (full), the direct regressor (NoDiff) or is the zero
    vector (NoEst), and the decoder adds its residual to the input.
    """

    def __init__(self, weights: ModelWeights):
        self.weights = weights.eval()
        self.schedule = weights.schedule()
        self.size_multiple = weights.arch.size_multiple

    @property
    def variant(self) -> Variant:
        return self.weights.variant

    @torch.no_grad()
    def estimate_feature(self, img: torch.Tensor, seed: int) -> torch.Tensor:
        """Z for a (B, 1, H, W) batch of compressed planes."""
        if self.variant == Variant.NOEST:
            return img.new_zeros(img.shape[0], self.weights.arch.latent_dim)
        if self.variant == Variant.NODIFF:
            return self.weights.regressor(img)
        return self.weights.estimator.estimate(img, self.schedule, seed)

    def pad_to_multiple(self, plane: np.ndarray, pad: bool) -> np.ndarray:
        height, width = plane.shape
        pad_h = (-height) % self.size_multiple
        pad_w = (-width) % self.size_multiple
        if not (pad_h or pad_w):
            return plane
        if not pad:
            raise ShapeMismatchError(
                f"Plane {height}x{width} is not divisible by {self.size_multiple}; "
                f"use --pad to edge-pad and crop back"
            )
        return np.pad(plane, ((0, pad_h), (0, pad_w)), mode="edge")

    @torch.no_grad()
    def enhance(self, plane: np.ndarray, seed: int, pad: bool = True) -> np.ndarray:
        """
        Enhance one H x W plane in [0, 1].

        The residual is computed in float32 and added to the float64 input, so a
        zero residual returns the input bit-exactly. Output is clamped to [0, 1].
        """
        height, width = plane.shape
        padded = self.pad_to_multiple(np.asarray(plane, dtype=np.float64), pad)
        img = torch.from_numpy(padded).float()[None, None]

        z = self.estimate_feature(img, seed)
        residual = self.weights.decoder.residual(img, z)[0, 0].double().numpy()

        enhanced = np.clip(padded + residual, 0.0, 1.0)
        return enhanced[:height, :width]
