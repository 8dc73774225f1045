"""BlindQE - Networks Package"""
from .blocks import check_finite
from .cbam import ConditionedCBAM
from .encoder import FeatureEncoder, PriorEncoder, compose_encoder_input, qp_planes
from .decoder import ConditionedUNet
from .estimator import DirectRegressor, Estimator, NoisePredictor, timestep_embedding
from .weights import (
    CHECKPOINT_FORMAT_VERSION,
    ModelWeights,
    load_checkpoint,
    parameter_digest,
    save_checkpoint,
)

__all__ = [
    "check_finite",
    "ConditionedCBAM",
    "FeatureEncoder",
    "PriorEncoder",
    "compose_encoder_input",
    "qp_planes",
    "ConditionedUNet",
    "DirectRegressor",
    "Estimator",
    "NoisePredictor",
    "timestep_embedding",
    "CHECKPOINT_FORMAT_VERSION",
    "ModelWeights",
    "load_checkpoint",
    "parameter_digest",
    "save_checkpoint",
]
