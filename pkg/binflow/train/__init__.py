from binflow.config import MaskConfig, NoiseConfig, TrainingConfig
from binflow.train.objectives import (
    BackTranslation,
    MaskedSample,
    Specials,
    add_noise,
    back_translate,
    clm_loss,
    dae_loss,
    make_mlm_sample,
    mle_loss,
    mlm_loss,
    reconstruction_loss,
)
from binflow.train.trainer import METRIC_FIELDS, StepMetrics, Trainer, TrainingAborted

__all__ = [
    "BackTranslation",
    "METRIC_FIELDS",
    "MaskConfig",
    "MaskedSample",
    "NoiseConfig",
    "Specials",
    "StepMetrics",
    "Trainer",
    "TrainingAborted",
    "TrainingConfig",
    "add_noise",
    "back_translate",
    "clm_loss",
    "dae_loss",
    "make_mlm_sample",
    "mle_loss",
    "mlm_loss",
    "reconstruction_loss",
]
