"""BlindQE - Pydantic Models"""
import math
from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

MANIFEST_FORMAT = "blindqe-manifest/1"
QP_MAX = 51


class Variant(str, Enum):
    """Model variant an evaluation record belongs to (report column order)."""
    FULL = "full"
    NODIFF = "NoDiff"
    NOEST = "NoEst"
    BASELINE = "baseline"


class Stage(str, Enum):
    """Training regime."""
    STAGE1 = "stage1"
    STAGE2 = "stage2"
    NOEST = "noest"
    NODIFF = "nodiff"


class Split(str, Enum):
    """Dataset split label."""
    ALL = "all"
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class CodecMode(str, Enum):
    """Degradation source."""
    PROXY = "proxy"
    EXTERNAL = "external"


class LossName(str, Enum):
    """Loss reported in the training log."""
    L_REC = "L_rec"
    L_EPS = "L_eps"
    L_EST = "L_est"


class CodecConfig(BaseModel):
    """Codec selection and parameters."""
    mode: CodecMode = CodecMode.PROXY
    block_size: int = 8
    external_encoder_path: Optional[str] = None
    external_args_template: str = "{in} {out} {qp} {w} {h}"
    external_config_path: Optional[str] = None

    @field_validator("block_size")
    @classmethod
    def _positive_block(cls, block_size: int) -> int:
        if block_size < 1:
            raise ValueError("block_size must be positive")
        return block_size

    @model_validator(mode="after")
    def _external_needs_path(self) -> "CodecConfig":
        if self.mode == CodecMode.EXTERNAL and not self.external_encoder_path:
            raise ValueError("external codec mode requires external_encoder_path")
        return self


class ArchConfig(BaseModel):
    """Architecture echo stored in every checkpoint."""
    latent_dim: int = 256
    cond_dim: int = 256
    base_width: int = 32
    unet_depth: int = 3
    encoder_stages: int = 3
    shuffle_factor: int = 2
    hidden_width: int = 512
    time_embed_dim: int = 64
    negative_slope: float = 0.1
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02

    @classmethod
    def from_settings(cls, settings) -> "ArchConfig":
        return cls(**{name: getattr(settings, name) for name in cls.model_fields})

    @property
    def size_multiple(self) -> int:
        """Spatial multiple both the condition encoder and the UNet accept."""
        return math.lcm(self.shuffle_factor * 2 ** self.encoder_stages, 2 ** self.unet_depth)

    def first_difference(self, other: "ArchConfig") -> Optional[str]:
        """Name of the first key whose value differs, or None."""
        mine, theirs = self.model_dump(), other.model_dump()
        for key in mine:
            if mine[key] != theirs.get(key):
                return key
        return None


class ManifestEntry(BaseModel):
    """One (source, qp) cell of the dataset; paths are relative to the manifest."""
    source_id: str
    qp: int
    gt_path: str
    compressed_path: str
    width: int
    height: int
    split: Split = Split.TRAIN
    group: Optional[str] = None


class DatasetManifest(BaseModel):
    """Mixed-QP dataset description."""
    format: str = MANIFEST_FORMAT
    qp_set: List[int]
    split: Split = Split.ALL
    codec_mode: CodecMode = CodecMode.PROXY
    corpus_hash: str
    seed: int = 0
    entries: List[ManifestEntry] = Field(default_factory=list)

    def select(self, split: Split) -> "DatasetManifest":
        """View restricted to one split."""
        split = Split(split)
        if split == Split.ALL:
            return self
        return self.model_copy(update={
            "split": split,
            "entries": [entry for entry in self.entries if entry.split == split],
        })

    @property
    def source_ids(self) -> List[str]:
        return sorted({entry.source_id for entry in self.entries})

    def to_lines(self) -> List[str]:
        """Header line followed by one JSON record per entry."""
        header = self.model_dump_json(exclude={"entries"})
        return [header] + [entry.model_dump_json() for entry in self.entries]

    @classmethod
    def from_lines(cls, lines: List[str]) -> "DatasetManifest":
        lines = [line for line in lines if line.strip()]
        if not lines:
            raise ValueError("empty manifest")
        manifest = cls.model_validate_json(lines[0])
        if manifest.format != MANIFEST_FORMAT:
            raise ValueError(f"unsupported manifest format '{manifest.format}'")
        manifest.entries = [ManifestEntry.model_validate_json(line) for line in lines[1:]]
        return manifest


class TrainConfig(BaseModel):
    """Settings one training run needs."""
    stage: Stage
    lr: float = 2e-4
    steps: int = 5000
    batch: int = 16
    patch: int = 64
    seed: int = 0
    T: int = 100
    d: int = 256
    checkpoint_every: int = 1000
    eval_every: int = 500
    grad_clip: float = 1.0
    qp_set: List[int] = Field(default_factory=lambda: [27, 32, 37, 42])

    @field_validator("lr")
    @classmethod
    def _positive_lr(cls, lr: float) -> float:
        if lr <= 0:
            raise ValueError("lr must be positive")
        return lr

    @field_validator("batch", "patch", "T", "d")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be positive")
        return value

    @field_validator("steps", "checkpoint_every", "eval_every")
    @classmethod
    def _non_negative(cls, value: int) -> int:
        if value < 0:
            raise ValueError("must not be negative")
        return value

    @classmethod
    def from_settings(cls, settings, stage: Stage) -> "TrainConfig":
        stage = Stage(stage)
        steps = settings.stage2_steps if stage in (Stage.STAGE2, Stage.NODIFF) else settings.stage1_steps
        return cls(
            stage=stage,
            lr=settings.lr,
            steps=steps,
            batch=settings.batch_size,
            patch=settings.patch_size,
            seed=settings.seed,
            T=settings.timesteps,
            d=settings.latent_dim,
            checkpoint_every=settings.checkpoint_every,
            eval_every=settings.eval_every,
            grad_clip=settings.grad_clip,
            qp_set=settings.qp_list,
        )


class TrainLog(BaseModel):
    """One logged loss value."""
    step: int
    loss_name: LossName
    value: float
    wall_ms: int

    @field_validator("value")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("logged loss must be finite")
        return value


class EvalRecord(BaseModel):
    """PSNR result for one (source, qp, variant)."""
    source_id: str
    qp: int
    variant: Variant
    psnr_hm: float
    psnr_en: float
    delta_psnr: float
    group: Optional[str] = None

    @model_validator(mode="after")
    def _delta_consistent(self) -> "EvalRecord":
        if self.delta_psnr != self.psnr_en - self.psnr_hm:
            raise ValueError("delta_psnr must equal psnr_en - psnr_hm")
        return self

    def as_row(self) -> Dict[str, str]:
        return {
            "source_id": self.source_id,
            "qp": str(self.qp),
            "variant": self.variant.value,
            "psnr_hm": repr(self.psnr_hm),
            "psnr_en": repr(self.psnr_en),
            "delta_psnr": repr(self.delta_psnr),
            "group": self.group or "",
        }
