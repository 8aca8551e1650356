"""Supervised training of an :class:`~umri.recon.UnrolledRecon` with the SSIM loss."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import physics
from .data import Sample
from .errors import ConfigError, DivergenceError
from .metrics import ssim, ssim_loss
from .nn.weights import ModelWeights, adam_step, backward, load_weights, save_weights
from .physics import SamplingMask
from .recon import UnrolledRecon

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_ssim", "lr")


@dataclass
class Schedule:
    lr: float = 1e-3
    decay_epoch: int = 40
    decay_factor: float = 0.1
    epochs: int = 50
    patience: int = 5
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError(f"invalid schedule {self}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``; decayed once ``epoch > decay_epoch``."""
        return self.lr * (self.decay_factor if epoch > self.decay_epoch else 1.0)


@dataclass
class TrainState:
    epoch: int = 0
    best_val: float = -math.inf
    best_epoch: int = 0
    bad_epochs: int = 0
    stopped_early: bool = False
    rows: list = field(default_factory=list)


def stack_samples(samples: Sequence[Sample], mask: SamplingMask):
    """Masked k-space batch and RSS targets as tensors."""
    k = torch.stack([torch.from_numpy(np.ascontiguousarray(s.kspace)) for s in samples])
    targets = torch.stack([torch.from_numpy(np.ascontiguousarray(s.target)) for s in samples])
    return physics.apply_mask(k, mask), targets.to(torch.float32)


def predict(model: UnrolledRecon, masked_kspace: torch.Tensor, mask: SamplingMask,
            batch_size: int = 8) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for i in range(0, masked_kspace.shape[0], batch_size):
            outs.append(model(masked_kspace[i:i + batch_size], mask))
    return torch.cat(outs)


def validate(model: UnrolledRecon, masked_kspace, targets, mask, batch_size: int = 8) -> float:
    recon = predict(model, masked_kspace, mask, batch_size).numpy()
    t = targets.numpy()
    return float(np.mean([ssim(r, y) for r, y in zip(recon, t)]))


def _save_state(ckpt_dir: str, weights: ModelWeights, state: TrainState) -> None:
    save_weights(weights, os.path.join(ckpt_dir, "last.umriw"))
    tmp = os.path.join(ckpt_dir, "state.json.incomplete")
    with open(tmp, "w") as fh:
        json.dump(asdict(state), fh)
    os.replace(tmp, os.path.join(ckpt_dir, "state.json"))


def _load_state(ckpt_dir: str) -> tuple[ModelWeights, TrainState]:
    with open(os.path.join(ckpt_dir, "state.json")) as fh:
        state = TrainState(**json.load(fh))
    return load_weights(os.path.join(ckpt_dir, "last.umriw")), state


def train(model: UnrolledRecon, train_set: Sequence[Sample], val_set: Sequence[Sample],
          mask: SamplingMask, schedule: Schedule = Schedule(),
          checkpoint_dir: Optional[str] = None, resume: bool = False,
          max_epochs: Optional[int] = None, on_epoch=None) -> tuple[ModelWeights, TrainState]:
    """Adam on every trainable tensor; returns the best-validation weights.

    With ``checkpoint_dir`` the best weights go to ``best.umriw`` and the full
    resumable state (weights, Adam moments, log) to ``last.umriw`` /
    ``state.json`` after every epoch. ``max_epochs`` stops after that many
    epochs in this call (used to simulate interruption).
    """
    if not train_set or not val_set:
        raise ConfigError("training and validation sets must be nonempty")
    weights = ModelWeights.from_module(model)
    state = TrainState()
    best: Optional[ModelWeights] = None
    if resume:
        if checkpoint_dir is None:
            raise ConfigError("resume requires a checkpoint directory")
        saved, state = _load_state(checkpoint_dir)
        saved.assign_to(model)
        weights = ModelWeights.from_module(model)
        weights.moments = {k: saved.moments[k] for k in saved.moments}
        weights.step = saved.step
        best_path = os.path.join(checkpoint_dir, "best.umriw")
        if os.path.exists(best_path):
            best = load_weights(best_path)

    k_train, t_train = stack_samples(train_set, mask)
    k_val, t_val = stack_samples(val_set, mask)
    n = k_train.shape[0]
    done = 0
    while state.epoch < schedule.epochs and not state.stopped_early:
        if max_epochs is not None and done >= max_epochs:
            break
        epoch = state.epoch + 1
        lr = schedule.lr_at(epoch)
        order = np.random.default_rng([schedule.seed, epoch]).permutation(n)
        model.train()
        losses = []
        for start in range(0, n, schedule.batch_size):
            idx = torch.from_numpy(order[start:start + schedule.batch_size])
            loss = ssim_loss(model(k_train[idx], mask), t_train[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            grads = backward(loss, weights)
            adam_step(weights, grads, lr)
            losses.append(float(loss.detach()) * len(idx))
        model.eval()
        val = validate(model, k_val, t_val, mask)
        row = {"epoch": epoch, "train_loss": sum(losses) / n, "val_ssim": val, "lr": lr}
        state.rows.append(row)
        state.epoch = epoch
        if val > state.best_val:
            state.best_val, state.best_epoch, state.bad_epochs = val, epoch, 0
            best = weights.snapshot()
            best.moments, best.step = {}, 0
            if checkpoint_dir:
                save_weights(best, os.path.join(checkpoint_dir, "best.umriw"))
        else:
            state.bad_epochs += 1
            if state.bad_epochs >= schedule.patience:
                state.stopped_early = True
        log.info("epoch %d loss %.5f val_ssim %.5f lr %.2e", epoch, row["train_loss"], val, lr)
        if checkpoint_dir:
            _save_state(checkpoint_dir, weights, state)
        if on_epoch is not None:
            on_epoch(row)
        done += 1
    return best if best is not None else weights.snapshot(), state
