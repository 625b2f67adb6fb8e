"""Instance-aware multimodal unpaired image-to-image translation at desk scale."""

from .data_model import (
    Category,
    ContentCode,
    DomainId,
    Granularity,
    ImageSample,
    InstanceBox,
    StyleBank,
    StyleCode,
    validate_sample,
)
from .losses import LossReport, LossWeights
from .networks import NetworkConfig, TranslationModel
from .training import TrainConfig, Trainer, load_checkpoint, save_checkpoint, translate

__version__ = "0.1.0"

__all__ = [
    "Category",
    "ContentCode",
    "DomainId",
    "Granularity",
    "ImageSample",
    "InstanceBox",
    "LossReport",
    "LossWeights",
    "NetworkConfig",
    "StyleBank",
    "StyleCode",
    "TrainConfig",
    "Trainer",
    "TranslationModel",
    "load_checkpoint",
    "save_checkpoint",
    "translate",
    "validate_sample",
]
