"""Sparse convolutional autoencoder: architecture, training, checkpoints.

Written directly on numpy with explicit gradients; no autodiff framework.
"""

from .model import (
    EncoderArch,
    EncoderParams,
    Embedding,
    LossValue,
    decode,
    encode,
    encode_batch,
    grad_check,
    init_params,
    loss,
    loss_and_grads,
)
from .train import EpochRecord, TrainConfig, TrainingLog, train
from .checkpoint import load_checkpoint, read_embeddings, save_checkpoint, write_embeddings

__all__ = [
    "EncoderArch",
    "EncoderParams",
    "Embedding",
    "LossValue",
    "TrainConfig",
    "TrainingLog",
    "EpochRecord",
    "decode",
    "encode",
    "encode_batch",
    "grad_check",
    "init_params",
    "load_checkpoint",
    "loss",
    "loss_and_grads",
    "read_embeddings",
    "save_checkpoint",
    "train",
    "write_embeddings",
]
