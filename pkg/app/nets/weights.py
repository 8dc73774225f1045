"""BlindQE - Model Weights and Checkpoints"""
import hashlib
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import torch
import torch.nn as nn

from app.errors import ArchitectureMismatchError, FormatError
from app.models import ArchConfig, Variant
from app.nets.decoder import ConditionedUNet
from app.nets.encoder import PriorEncoder
from app.nets.estimator import DirectRegressor, Estimator
from app.services.diffusion import NoiseSchedule, build_schedule

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ModelWeights:
    """Every network of one model variant plus the config that shaped them."""
    arch: ArchConfig
    encoder: PriorEncoder
    decoder: ConditionedUNet
    estimator: Estimator
    regressor: Optional[DirectRegressor] = None
    variant: Variant = Variant.FULL

    @classmethod
    def build(cls, arch: ArchConfig, variant: Variant = Variant.FULL, seed: int = 0) -> "ModelWeights":
        """Freshly initialised networks; initialisation is seeded and leaves global RNG untouched."""
        variant = Variant(variant)
        shared = dict(
            base_width=arch.base_width,
            stages=arch.encoder_stages,
            shuffle_factor=arch.shuffle_factor,
            negative_slope=arch.negative_slope,
        )
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            encoder = PriorEncoder(arch.latent_dim, **shared)
            decoder = ConditionedUNet(
                arch.latent_dim,
                base_width=arch.base_width,
                depth=arch.unet_depth,
                negative_slope=arch.negative_slope,
                conditioned=variant != Variant.NOEST,
            )
            estimator = Estimator(
                arch.latent_dim,
                arch.cond_dim,
                hidden_width=arch.hidden_width,
                time_embed_dim=arch.time_embed_dim,
                **shared,
            )
            regressor = None
            if variant == Variant.NODIFF:
                regressor = DirectRegressor(
                    arch.latent_dim, arch.cond_dim, hidden_width=arch.hidden_width, **shared
                )

        return cls(
            arch=arch,
            encoder=encoder,
            decoder=decoder,
            estimator=estimator,
            regressor=regressor,
            variant=variant,
        )

    @property
    def networks(self) -> Dict[str, nn.Module]:
        networks = {
            "encoder": self.encoder,
            "decoder": self.decoder,
            "estimator": self.estimator,
        }
        if self.regressor is not None:
            networks["regressor"] = self.regressor
        return networks

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.arch.timesteps, self.arch.beta_start, self.arch.beta_end)

    def eval(self) -> "ModelWeights":
        for network in self.networks.values():
            network.eval()
        return self


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over every named parameter's bytes."""
    digest = hashlib.sha256()
    for name, param in module.named_parameters():
        digest.update(name.encode("utf-8"))
        digest.update(param.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(
    weights: ModelWeights,
    path: str | Path,
    training_state: Optional[Dict[str, Any]] = None
) -> Path:
    """
    Write a single-file checkpoint atomically.

    Contents: format version, architecture echo, variant, one state dict per
    network and an optional training state (step, optimizer state, config).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch": weights.arch.model_dump(),
        "variant": weights.variant.value,
        "networks": {name: net.state_dict() for name, net in weights.networks.items()},
        "training_state": training_state,
    }

    tmp_path = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp_path)
    os.replace(tmp_path, path)
    logger.info(f"Checkpoint written: {path}")
    return path


def load_checkpoint(
    path: str | Path,
    expected_arch: Optional[ArchConfig] = None
) -> Tuple[ModelWeights, Optional[Dict[str, Any]]]:
    """
    Load a checkpoint written by ``save_checkpoint``.

    Args:
        path: Checkpoint file
        expected_arch: When given, the stored architecture must match it

    Returns:
        (weights, training_state)
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")

    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise FormatError(f"Unreadable checkpoint {path}: {e}") from e

    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(
            f"Checkpoint {path} has format version "
            f"{payload.get('format_version') if isinstance(payload, dict) else None}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )

    arch = ArchConfig(**payload["arch"])
    if expected_arch is not None:
        differing = expected_arch.first_difference(arch)
        if differing is not None:
            raise ArchitectureMismatchError(
                f"Checkpoint {path} differs from the requested architecture at '{differing}': "
                f"stored {getattr(arch, differing)!r}, requested {getattr(expected_arch, differing)!r}"
            )

    weights = ModelWeights.build(arch, Variant(payload["variant"]))
    for name, network in weights.networks.items():
        if name not in payload["networks"]:
            raise FormatError(f"Checkpoint {path} has no parameters for '{name}'")
        network.load_state_dict(payload["networks"][name])

    return weights.eval(), payload.get("training_state")
