"""Loss, optimiser, plateau scheduler and the training loop."""
from __future__ import annotations

import csv
import logging
import math
import random
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import IGNORE, normalize
from .layers import save_checkpoint
from .metrics import ConfusionMatrix, mean_iou, pixel_accuracy
from .network import config_text

log = logging.getLogger(__name__)


class AllIgnoredWarning(RuntimeWarning):
    pass


def cross_entropy_loss(logits, labels, ignore_index=IGNORE):
    """Mean pixel-wise cross entropy over non-ignored pixels.

    ``labels`` is an integer array (N, H, W).  If every pixel is ignored the
    loss is 0 with zero gradient and an :class:`AllIgnoredWarning` is issued.
    """
    logits = T.as_tensor(logits)
    z = logits.data
    labels = np.asarray(labels)
    n, k, h, w = z.shape
    if labels.shape != (n, h, w):
        raise T.DimensionError(f"labels shape {labels.shape} does not match logits {z.shape}")
    valid = labels != ignore_index
    if np.any(labels[valid] >= k) or np.any(labels[valid] < 0):
        raise ValueError(f"labels must be in 0..{k - 1} or {ignore_index}")
    count = int(valid.sum())
    if count == 0:
        warnings.warn("all pixels ignored; loss defined as 0", AllIgnoredWarning, stacklevel=2)
        return T.Tensor.from_op(np.zeros((), dtype=z.dtype), (logits,),
                                lambda g: (np.zeros_like(z),), "cross_entropy")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1, axis=1)
        grad *= valid[:, None] / count
        return (grad * g,)

    return T.Tensor.from_op(np.asarray(loss, dtype=z.dtype), (logits,), backward, "cross_entropy")


@dataclass
class SGDNesterov:
    """SGD with Nesterov momentum: ``v = mu*v + g; p -= lr*(g + mu*v)``."""

    params: list
    lr: float = 1e-6
    momentum: float = 0.7
    velocity: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.velocity is None:
            self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None):
        grads = [p.grad for p in self.params] if grads is None else grads
        for p, v, g in zip(self.params, self.velocity, grads):
            if g is None:
                continue
            v *= self.momentum
            v += g
            p.data -= (self.lr * (g + self.momentum * v)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def sgd_nesterov_step(params, grads, state):
    state.step(grads)
    return params


@dataclass
class PlateauScheduler:
    """Halve the learning rate once the monitored loss stalls for ``patience`` epochs.

    Improvement means ``metric < best * (1 - threshold)`` (relative, mode min).
    """

    lr: float
    factor: float = 0.5
    patience: int = 20
    threshold: float = 1e-4
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, metric):
        if not math.isfinite(metric):
            raise ValueError(f"scheduler metric must be finite, got {metric}")
        if metric < self.best * (1 - self.threshold):
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
        return self.lr


def scheduler_step(state, observed_metric):
    return state.step(observed_metric)


@dataclass
class TrainConfig:
    epochs: int = 180
    batch_size: int = 2
    lr: float = 1e-6
    momentum: float = 0.7
    seed: int = 42
    eval_every: int = 1
    checkpoint_path: str | None = None
    log_path: str | None = None
    normalize_inputs: bool = True
    max_steps: int | None = None


# the schedule used for the full-size experiments
PUBLISHED_PRESET = TrainConfig(epochs=180, batch_size=2, lr=1e-6, momentum=0.7, seed=42)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_miou: float
    lr: float

    def csv_row(self):
        return [str(self.epoch)] + [f"{v:.6g}" for v in (self.train_loss, self.val_loss, self.val_miou, self.lr)]


def _stack(samples, norm):
    images = np.concatenate([s.image for s in samples], axis=0)
    if norm:
        images = normalize(images).astype(np.float32)
    labels = np.stack([s.label for s in samples])
    return images, labels


def evaluate(net, samples, num_classes, batch_size=2, norm=True, scored=None):
    """Eval-mode loss, confusion matrix and mIoU over ``samples``."""
    cm = ConfusionMatrix(num_classes)
    total, pixels = 0.0, 0
    for i in range(0, len(samples), batch_size):
        x, y = _stack(samples[i:i + batch_size], norm)
        logits = net(x.astype(net.parameters()[0].dtype), train=False)
        valid = int((y != IGNORE).sum())
        if valid:
            total += cross_entropy_loss(logits.detach(), y).item() * valid
            pixels += valid
        cm.accumulate(logits.data.argmax(axis=1), y)
    loss = total / pixels if pixels else 0.0
    return loss, cm, mean_iou(cm, scored)


def first_nan_layer(net, x):
    with T.debug_nans():
        try:
            net(x, train=False)
        except FloatingPointError as exc:
            return str(exc)
    return "no non-finite activations in a fresh forward pass"


def train(net, train_samples, val_samples, cfg: TrainConfig, scored=None, on_step=None):
    """Train ``net`` in place; returns the per-epoch log.

    Batches follow a seeded shuffle per epoch, so a fixed seed gives a fixed
    trajectory.  The checkpoint with the lowest validation loss is written to
    ``cfg.checkpoint_path`` when set.
    """
    num_classes = net.spec.num_classes
    for s in list(train_samples) + list(val_samples):
        if s.label[s.label != IGNORE].max(initial=0) >= num_classes:
            raise ValueError(f"sample {s.name} has labels outside the network's {num_classes} classes")
    params = net.parameters()
    dtype = params[0].dtype
    opt = SGDNesterov(params, cfg.lr, cfg.momentum)
    sched = PlateauScheduler(cfg.lr)
    rng = random.Random(cfg.seed)
    history = []
    best_val = math.inf
    steps = 0
    writer = None
    fh = None
    if cfg.log_path:
        fh = open(cfg.log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_miou", "lr"])
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = list(range(len(train_samples)))
            rng.shuffle(order)
            running, batches = 0.0, 0
            for i in range(0, len(order), cfg.batch_size):
                batch = [train_samples[j] for j in order[i:i + cfg.batch_size]]
                x, y = _stack(batch, cfg.normalize_inputs)
                x = x.astype(dtype)
                logits = net(x, train=True)
                loss = cross_entropy_loss(logits, y)
                value = loss.item()
                if not math.isfinite(value):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch}: {first_nan_layer(net, x)}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                running += value
                batches += 1
                steps += 1
                if on_step is not None:
                    on_step(steps, value)
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    break
            train_loss = running / max(batches, 1)
            if val_samples and epoch % cfg.eval_every == 0:
                val_loss, _, val_miou = evaluate(net, val_samples, num_classes, cfg.batch_size,
                                                 cfg.normalize_inputs, scored)
            else:
                val_loss, val_miou = train_loss, float("nan")
            lr_used = opt.lr
            opt.lr = sched.step(val_loss)
            entry = EpochLog(epoch, train_loss, val_loss, val_miou, lr_used)
            history.append(entry)
            if writer:
                writer.writerow(entry.csv_row())
                fh.flush()
            log.info("epoch %d train %.6g val %.6g miou %.6g lr %.6g", epoch, train_loss, val_loss,
                     val_miou, lr_used)
            if cfg.checkpoint_path and val_loss < best_val:
                best_val = val_loss
                save_checkpoint(cfg.checkpoint_path, net.named_parameters(), net.named_buffers(),
                                config_text(net.spec, net.options))
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
    finally:
        if fh:
            fh.close()
    return history
