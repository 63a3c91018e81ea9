"""Super-resolution backends, training and the synthetic channel experiment."""

from .model import (
    BicubicBaseline,
    ConvModel,
    SRInput,
    deploy,
    load_model,
    save_model,
    super_resolve,
)
from .synthetic import (
    CHANNEL_CONFIGS,
    SyntheticSpec,
    channel_label,
    make_synthetic_dataset,
    parse_channels,
    sisr_vs_misr_experiment,
)
from .training import Adam, PlateauSchedule, TrainConfig, TrainResult, stack_patches, train

__all__ = [
    "Adam", "BicubicBaseline", "CHANNEL_CONFIGS", "ConvModel", "PlateauSchedule", "SRInput",
    "SyntheticSpec", "TrainConfig", "TrainResult", "channel_label", "deploy", "load_model",
    "make_synthetic_dataset", "parse_channels", "save_model", "sisr_vs_misr_experiment",
    "stack_patches", "super_resolve", "train",
]
