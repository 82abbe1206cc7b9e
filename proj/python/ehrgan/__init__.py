"""Sequence GAN for medical-event records and the CNN risk predictor it augments."""

from ._core import (
    Cohort,
    Config,
    Embedding,
    Error,
    Gan,
    NonFiniteError,
    ParseError,
    Predictor,
    VersionMismatch,
    __version__,
    accuracy,
    auroc,
    build_cohort,
    conv1d,
    deconv1d,
    fidelity,
    train_embedding,
    train_gan,
    train_predictor,
)

__all__ = [
    "Cohort",
    "Config",
    "Embedding",
    "Error",
    "Gan",
    "NonFiniteError",
    "ParseError",
    "Predictor",
    "VersionMismatch",
    "__version__",
    "accuracy",
    "auroc",
    "build_cohort",
    "conv1d",
    "deconv1d",
    "fidelity",
    "train_embedding",
    "train_gan",
    "train_predictor",
]
