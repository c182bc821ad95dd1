"""Training loop: per-page patch sampling, Adam, early stopping.

Deterministic given the seed: page sampling, shuffling, and init all use
fixed substreams, and updates run in a single sequence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import EncoderArch, EncoderParams, LossValue, init_params, loss_and_grads


@dataclass
class TrainConfig:
    lambda_sparsity: float = 1e-5
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 50
    max_patches_per_image: int = 300
    early_stop_patience: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    sparsity_enabled: bool = True

    def validate(self) -> None:
        if self.lambda_sparsity < 0:
            raise ValueError("lambda_sparsity must be >= 0")
        for name in ("lr", "batch_size", "epochs", "max_patches_per_image",
                     "adam_beta1", "adam_beta2", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EpochRecord:
    epoch: int
    recon: float
    sparsity: float
    total: float
    lr: float

    def to_json(self) -> str:
        return json.dumps(
            {"epoch": self.epoch, "recon": self.recon, "sparsity": self.sparsity,
             "total": self.total, "lr": self.lr}
        )


@dataclass
class TrainingLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.epochs:
                fh.write(rec.to_json() + "\n")

    @staticmethod
    def read_jsonl(path: str | Path) -> "TrainingLog":
        log = TrainingLog()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                log.epochs.append(EpochRecord(**json.loads(line)))
        if log.epochs:
            log.best_epoch = min(log.epochs, key=lambda r: (r.recon, r.epoch)).epoch
        return log


def sample_training_patches(pages: list, cfg: TrainConfig) -> np.ndarray:
    """Stack up to max_patches_per_image patches per page, sampled
    uniformly without replacement from a per-page substream."""
    chunks = []
    for idx, page in enumerate(pages):
        patches = [p.data for p in page.patches]
        if not patches:
            continue
        if len(patches) > cfg.max_patches_per_image:
            rng = np.random.default_rng([cfg.seed, 0, idx])
            keep = rng.choice(len(patches), size=cfg.max_patches_per_image, replace=False)
            patches = [patches[i] for i in sorted(keep)]
        chunks.append(np.stack(patches))
    if not chunks:
        raise ValueError("no patches to train on")
    return np.concatenate(chunks).astype(np.float32)


class _Adam:
    def __init__(self, tensors: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.adam_beta1**self.t
        bc2 = 1.0 - c.adam_beta2**self.t
        for k, g in grads.items():
            g = g.astype(tensors[k].dtype, copy=False)
            self.m[k] = c.adam_beta1 * self.m[k] + (1.0 - c.adam_beta1) * g
            self.v[k] = c.adam_beta2 * self.v[k] + (1.0 - c.adam_beta2) * (g * g)
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            tensors[k] -= c.lr * mhat / (np.sqrt(vhat) + c.adam_eps)


def train(
    pages: list,
    cfg: TrainConfig,
    arch: EncoderArch | None = None,
    seed: int | None = None,
) -> tuple[EncoderParams, TrainingLog]:
    """Train on all pages' sampled patches; return the parameters from
    the best-reconstruction epoch and the per-epoch log.

    Stops once the epoch reconstruction loss has failed to improve for
    more than early_stop_patience consecutive epochs (patience 0 stops at
    the first non-improving epoch).
    """
    cfg.validate()
    arch = arch or EncoderArch()
    seed = cfg.seed if seed is None else seed
    X = sample_training_patches(pages, cfg)
    params = init_params(arch, seed)
    adam = _Adam(params.tensors, cfg)

    log = TrainingLog()
    best_recon = np.inf
    best_params = params.copy()
    since_best = 0
    m = X.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([seed, 2, epoch]).permutation(m)
        recon_sum = 0.0
        sparsity_sum = 0.0
        for lo in range(0, m, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            value, grads = loss_and_grads(params, X[idx], cfg)
            adam.step(params.tensors, grads)
            recon_sum += value.recon * idx.size
            sparsity_sum += value.sparsity * idx.size
        recon = recon_sum / m
        sparsity = sparsity_sum / m
        lam = cfg.lambda_sparsity if cfg.sparsity_enabled else 0.0
        log.epochs.append(
            EpochRecord(epoch=epoch, recon=recon, sparsity=sparsity,
                        total=recon + lam * sparsity, lr=cfg.lr)
        )
        if recon < best_recon:
            best_recon = recon
            best_params = params.copy()
            log.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.early_stop_patience:
                log.stopped_early = True
                break
    return best_params, log


def epoch_loss(params: EncoderParams, X: np.ndarray, cfg: TrainConfig,
               batch_size: int = 256) -> LossValue:
    """Full-set loss at fixed parameters, batched for memory."""
    from .model import loss as loss_fn

    m = X.shape[0]
    recon = sparsity = 0.0
    for lo in range(0, m, batch_size):
        v = loss_fn(params, X[lo : lo + batch_size], cfg)
        n = min(batch_size, m - lo)
        recon += v.recon * n
        sparsity += v.sparsity * n
    recon /= m
    sparsity /= m
    lam = cfg.lambda_sparsity if cfg.sparsity_enabled else 0.0
    return LossValue(total=recon + lam * sparsity, recon=recon, sparsity=sparsity)
