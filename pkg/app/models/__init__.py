"""BlindQE - Models Package"""
from .records import (
    MANIFEST_FORMAT,
    QP_MAX,
    Variant,
    Stage,
    Split,
    CodecMode,
    LossName,
    CodecConfig,
    ArchConfig,
    ManifestEntry,
    DatasetManifest,
    TrainConfig,
    TrainLog,
    EvalRecord,
)

__all__ = [
    "MANIFEST_FORMAT",
    "QP_MAX",
    "Variant",
    "Stage",
    "Split",
    "CodecMode",
    "LossName",
    "CodecConfig",
    "ArchConfig",
    "ManifestEntry",
    "DatasetManifest",
    "TrainConfig",
    "TrainLog",
    "EvalRecord",
]
