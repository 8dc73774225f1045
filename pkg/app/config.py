"""BlindQE - Configuration"""
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import dotenv_values
from pydantic import ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.errors import ConfigurationError
from app.models import ArchConfig


class Settings(BaseSettings):
    """Toolkit settings loaded from environment variables and config files."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        extra="forbid",
    )

    # Architecture
    latent_dim: int = 256
    cond_dim: int = 256
    base_width: int = 32
    unet_depth: int = 3
    encoder_stages: int = 3
    shuffle_factor: int = 2
    hidden_width: int = 512
    time_embed_dim: int = 64
    negative_slope: float = 0.1

    # Diffusion
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02

    # Data
    qp_set: str = "27,32,37,42"
    patch_size: int = 64
    batch_size: int = 16
    split_ratio: float = 0.9
    min_plane_size: int = 32
    allowed_extensions: str = "png,jpg,jpeg,tiff,bmp"

    # Codec
    codec_mode: str = "proxy"
    block_size: int = 8
    hevc_encoder_path: Optional[str] = None
    hevc_config_path: str = "encoder_intra_main.cfg"
    hevc_args_template: str = (
        "-c {cfg} -i {in} -o {out} -b {out}.bin "
        "-wdt {w} -hgt {h} -q {qp} -f 1 -fr 1 "
        "--InputBitDepth=8 --OutputBitDepth=8 --InputChromaFormat=400"
    )

    # Training
    lr: float = 2e-4
    grad_clip: float = 1.0
    stage1_steps: int = 5000
    stage2_steps: int = 5000
    checkpoint_every: int = 1000
    eval_every: int = 500
    seed: int = 0
    deterministic: bool = True

    # Logging
    log_level: str = "INFO"

    @field_validator("qp_set")
    @classmethod
    def _qps_in_range(cls, qp_set: str) -> str:
        qps = [qp.strip() for qp in qp_set.split(",") if qp.strip()]
        if not qps or not all(qp.isdigit() and 0 <= int(qp) <= 51 for qp in qps):
            raise ValueError(f"qp_set must be comma-separated integers in [0, 51], got '{qp_set}'")
        return qp_set

    @field_validator("log_level")
    @classmethod
    def _known_level(cls, level: str) -> str:
        level = level.upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"unknown log level '{level}'")
        return level

    @property
    def qp_list(self) -> List[int]:
        return sorted(int(qp.strip()) for qp in self.qp_set.split(",") if qp.strip())

    @property
    def allowed_extensions_list(self) -> List[str]:
        return [ext.strip().lower() for ext in self.allowed_extensions.split(",")]

    @model_validator(mode="after")
    def _patch_fits_networks(self) -> "Settings":
        multiple = ArchConfig.from_settings(self).size_multiple
        if self.patch_size % multiple:
            raise ValueError(
                f"patch_size {self.patch_size} must be a multiple of {multiple} "
                f"(shuffle_factor * 2**encoder_stages and 2**unet_depth)"
            )
        return self


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()


def read_config_file(config_path: str | Path) -> Dict[str, Any]:
    """
    Parse a flat ``key = value`` config file.

    Lines starting with ``#`` are comments. Keys are matched to Settings fields
    case-insensitively, with dashes accepted in place of underscores.
    """
    config_path = Path(config_path)
    if not config_path.is_file():
        raise ConfigurationError(f"Config file not found: {config_path}")

    values = {}
    for key, value in dotenv_values(config_path).items():
        if value is None:
            raise ConfigurationError(f"Config key '{key}' in {config_path} has no value")
        values[key.strip().lower().replace("-", "_")] = value
    return values


def load_settings(
    config_path: Optional[str | Path] = None,
    overrides: Optional[Dict[str, Any]] = None
) -> Settings:
    """
    Build settings for one invocation.

    Precedence: defaults < environment < config file < explicit overrides.
    """
    values: Dict[str, Any] = {}
    if config_path is not None:
        values.update(read_config_file(config_path))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})

    try:
        return Settings(**values)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        if not location:
            raise ConfigurationError(f"Invalid settings: {first['msg']}") from e
        raise ConfigurationError(f"Invalid setting '{location}': {first['msg']}") from e
