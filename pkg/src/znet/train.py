"""Soft Dice loss, Adam and the mini-batch training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ParamStore, ZNet, save_checkpoint
from .tensor import ContractError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class DiceConfig:
    s: float = 1.0

    def __post_init__(self):
        if self.s < 0:
            raise ValueError("dice smoothing term must be >= 0")


def _check_pair(z, y):
    if z.shape != y.shape:
        raise ShapeError(f"prediction shape {z.shape} != mask shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("mask must be binary")


def dice_loss(z: np.ndarray, y: np.ndarray, cfg: DiceConfig = DiceConfig()):
    """Per-item soft Dice loss ``1 - (2 sum(zy) + s) / (sum(z) + sum(y) + s)``.

    Returns ``(per_item, mean)``. An item whose denominator is zero (only
    possible with ``s == 0`` and two empty masks) counts as a perfect match.
    """
    _check_pair(z, y)
    axes = tuple(range(1, z.ndim))
    num = 2 * (z * y).sum(axis=axes) + cfg.s
    den = z.sum(axis=axes) + y.sum(axis=axes) + cfg.s
    safe = np.where(den == 0, 1, den)
    per_item = np.where(den == 0, 0.0, 1 - num / safe)
    return per_item, float(per_item.mean())


def dice_loss_backward(z: np.ndarray, y: np.ndarray, cfg: DiceConfig = DiceConfig()) -> np.ndarray:
    """Gradient of the batch-mean Dice loss with respect to ``z``."""
    _check_pair(z, y)
    axes = tuple(range(1, z.ndim))
    bcast = (slice(None),) + (None,) * (z.ndim - 1)
    num = (2 * (z * y).sum(axis=axes) + cfg.s)[bcast]
    den = (z.sum(axis=axes) + y.sum(axis=axes) + cfg.s)[bcast]
    if np.any(den == 0):
        raise ContractError("dice gradient undefined for empty masks with s == 0")
    return -(2 * y * den - num) / den**2 / z.shape[0]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0


def adam_step(store: ParamStore, state: AdamState) -> None:
    state.t += 1
    c1 = 1 - state.beta1 ** state.t
    c2 = 1 - state.beta2 ** state.t
    for name, p in store.trainable():
        g = p.grad
        if g is None or g.shape != p.value.shape:
            raise ContractError(f"missing gradient for {name}")
        p.m *= state.beta1
        p.m += (1 - state.beta1) * g
        p.v *= state.beta2
        p.v += (1 - state.beta2) * g * g
        mhat = p.m / c1
        vhat = p.v / c2
        p.value -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.value.dtype)
        g[...] = 0


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 1
    seed: int = 0
    shuffle: bool = True
    lr: float = 1e-3
    max_steps: int | None = None
    checkpoint_every: int = 0  # steps; 0 = only at the end
    checkpoint_path: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainLog:
    steps: list  # (step, epoch, loss)
    epochs: list  # (epoch, mean loss)

    @property
    def final_loss(self) -> float:
        return self.steps[-1][2] if self.steps else float("nan")


class NonFiniteLoss(RuntimeError):
    pass


def epoch_order(n: int, epoch: int, tcfg: TrainConfig) -> np.ndarray:
    if not tcfg.shuffle:
        return np.arange(n)
    return np.random.default_rng([tcfg.seed, epoch]).permutation(n)


def train(model: ZNet, images: np.ndarray, masks: np.ndarray, tcfg: TrainConfig,
          dice: DiceConfig = DiceConfig(), adam: AdamState | None = None,
          start_step: int = 0) -> TrainLog:
    """Minimise the mean Dice loss over ``(images, masks)`` with Adam.

    ``images`` and ``masks`` are (N, 1, h, w). Batch order is a pure function
    of ``(seed, epoch)`` so a run resumed at ``start_step`` sees the same
    batches it would have seen uninterrupted.
    """
    n = len(images)
    if n == 0:
        raise ValueError("empty training set")
    if images.shape != masks.shape:
        raise ShapeError(f"images {images.shape} and masks {masks.shape} differ")
    if tuple(images.shape[2:]) != model.cfg.input_size:
        raise ShapeError(f"slice size {images.shape[2:]} != model input {model.cfg.input_size}")
    adam = adam or AdamState(lr=tcfg.lr)
    images = images.astype(model.cfg.dtype, copy=False)
    masks = masks.astype(model.cfg.dtype, copy=False)
    per_epoch = -(-n // tcfg.batch_size)
    logfh = open(tcfg.log_path, "a") if tcfg.log_path else None
    result = TrainLog([], [])
    step = start_step
    try:
        for epoch in range(start_step // per_epoch, tcfg.epochs):
            order = epoch_order(n, epoch, tcfg)
            losses = []
            for b in range(step - epoch * per_epoch, per_epoch):
                if tcfg.max_steps is not None and step >= tcfg.max_steps:
                    break
                idx = order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]
                x, y = images[idx], masks[idx]
                prob = model.forward(x, "train")
                _, loss = dice_loss(prob, y, dice)
                if not np.isfinite(loss):
                    raise NonFiniteLoss(f"non-finite loss at step {step} (epoch {epoch}, batch {b})")
                model.store.zero_grad()
                model.backward(dice_loss_backward(prob, y, dice).astype(prob.dtype))
                adam_step(model.store, adam)
                step += 1
                losses.append(loss)
                result.steps.append((step, epoch, loss))
                if logfh:
                    logfh.write(f"{step},{epoch},{loss!r}\n")
                if tcfg.checkpoint_path and tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
                    save_checkpoint(tcfg.checkpoint_path, model.store, model.cfg, adam.t, step)
            if losses:
                mean = float(np.mean(losses))
                result.epochs.append((epoch, mean))
                log.info("epoch %d mean dice loss %.6f", epoch, mean)
                if logfh:
                    logfh.write(f"# epoch {epoch} mean_loss {mean!r}\n")
            if tcfg.max_steps is not None and step >= tcfg.max_steps:
                break
    finally:
        if logfh:
            logfh.close()
    if tcfg.checkpoint_path:
        save_checkpoint(tcfg.checkpoint_path, model.store, model.cfg, adam.t, step)
    return result


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """1 where ``prob > threshold``; a value exactly at the threshold maps to 0."""
    return (prob > threshold).astype(np.uint8)


def predict(model: ZNet, slices: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Eval-mode probabilities for a stack of (d, h, w) slices, returned as (d, h, w)."""
    if slices.ndim != 3 or tuple(slices.shape[1:]) != model.cfg.input_size:
        raise ShapeError(f"slices {slices.shape} do not match model input {model.cfg.input_size}")
    return model.predict_proba(slices[:, None].astype(model.cfg.dtype), batch_size)[:, 0]
