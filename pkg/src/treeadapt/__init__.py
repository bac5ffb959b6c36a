"""Few-shot cross-domain tree counting: density estimation with a dual-domain transformer."""

__version__ = "0.1.0"

from .data import (
    DomainProfile,
    Sample,
    SOURCE_PROFILE,
    TARGET_PROFILE,
    cutmix,
    generate_synthetic,
    load_dataset,
    points_to_density,
)
from .encoder import Encoder, EncoderConfig, FeaturePyramid
from .decoder import CountingModel, DabConfig, Decoder, ModelConfig
from .losses import (
    HcdfaWeights,
    OtConfig,
    TdmWeights,
    count_loss,
    hcdfa_loss,
    ot_loss,
    tdm_loss,
    tv_loss,
)
from .discriminator import Discriminator, DiscriminatorConfig
from .trainer import TrainConfig, Trainer, lambda_schedule, load_model, train
from .evaluation import EvalConfig, MatchResult, MetricsReport, evaluate, match_points

__all__ = [
    "CountingModel", "DabConfig", "Decoder", "Discriminator", "DiscriminatorConfig", "DomainProfile",
    "Encoder", "EncoderConfig", "EvalConfig", "FeaturePyramid", "HcdfaWeights", "MatchResult",
    "MetricsReport", "ModelConfig", "OtConfig", "SOURCE_PROFILE", "Sample", "TARGET_PROFILE",
    "TdmWeights", "TrainConfig", "Trainer", "count_loss", "cutmix", "evaluate", "generate_synthetic",
    "hcdfa_loss", "lambda_schedule", "load_dataset", "load_model", "match_points", "ot_loss",
    "points_to_density", "tdm_loss", "train", "tv_loss",
]
