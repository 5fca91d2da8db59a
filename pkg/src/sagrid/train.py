"""Supervised identity-classification training.

Covers input augmentation (resize, flip, pixel scaling, mean centering,
random erasing), SGD with momentum and weight decay, a stepped exponential
learning-rate policy, per-epoch logging, and validation-based model selection.

All randomness is derived from the config seed; the augmentation stream for a
sample is keyed by (seed, epoch, sample index) so results are reproducible
regardless of batching or prefetching.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .layers import cross_entropy, resize_bilinear
from .model import TwoBranchModel, save_checkpoint
from .tensor import Parameter, Tensor, mul, no_grad

__all__ = [
    "TrainConfig",
    "SGD",
    "lr_at",
    "hflip",
    "random_erase",
    "augment",
    "preprocess",
    "epoch_order",
    "train",
    "TrainingLog",
]


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_backbone: float = 0.01
    lr_classifier: float = 0.1
    gamma: float = 0.1
    step_size: int = 30
    seed: int = 0
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    erase_area: tuple = (0.02, 0.4)
    erase_aspect: tuple = (0.3, 3.33)
    # 0 means the default holdout of one image per identity
    val_fraction: float = 0.0
    input_hw: tuple = (160, 64)
    # stop once an epoch's train accuracy reaches this value (None = run all epochs)
    early_stop_acc: Optional[float] = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.step_size < 1:
            raise ValueError("epochs, batch_size and step_size must be >= 1")
        for name in ("lr_backbone", "lr_classifier", "gamma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")


def lr_at(config: TrainConfig, epoch: int) -> tuple[float, float]:
    """Stepped exponential schedule: lr0 * gamma ** (epoch // step_size)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    factor = config.gamma ** (epoch // config.step_size)
    return config.lr_backbone * factor, config.lr_classifier * factor


class SGD:
    """Momentum SGD with decoupled-by-group learning rates.

    Update per parameter: v <- momentum*v + grad + weight_decay*param, then
    param <- param - lr*v. Gradients are zeroed after the step.
    """

    def __init__(self, groups: dict[str, list[Parameter]], momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        self.groups = {name: list(params) for name, params in groups.items()}
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {
            name: [np.zeros_like(p.data) for p in params]
            for name, params in self.groups.items()
        }

    def step(self, lrs: dict[str, float]) -> None:
        for name, params in self.groups.items():
            lr = lrs[name]
            for p, v in zip(params, self.velocity[name]):
                v *= self.momentum
                v += p.grad
                if self.weight_decay:
                    v += self.weight_decay * p.data
                p.data -= lr * v
                p.zero_grad()


def hflip(image: np.ndarray) -> np.ndarray:
    """Mirror a [C x H x W] image along its width."""
    return image[:, :, ::-1].copy()


def random_erase(image: np.ndarray, rng: np.random.Generator,
                 area_range=(0.02, 0.4), aspect_range=(0.3, 3.33),
                 fill_range=(-1.0, 1.0)) -> np.ndarray:
    """Blank a random rectangle with noise; returns (image, box) for testability."""
    c, h, w = image.shape
    for _ in range(100):
        area = rng.uniform(*area_range) * h * w
        aspect = rng.uniform(*aspect_range)
        eh = int(round(np.sqrt(area * aspect)))
        ew = int(round(np.sqrt(area / aspect)))
        if 0 < eh < h and 0 < ew < w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            image[:, top : top + eh, left : left + ew] = rng.uniform(
                fill_range[0], fill_range[1], size=(c, eh, ew))
            return image, (top, left, eh, ew)
    return image, None


def augment(image: np.ndarray, rng: np.random.Generator, mean, out_hw=(160, 64),
            flip_prob: float = 0.5, erase_prob: float = 0.5,
            erase_area=(0.02, 0.4), erase_aspect=(0.3, 3.33)) -> np.ndarray:
    """Training-time transform of one [3 x H x W] image with values in [0,1].

    Order: bilinear resize, random horizontal flip, map to [-1,1] via 2x-1,
    subtract the per-channel dataset mean (given in the scaled space), random
    erasing.
    """
    img = resize_bilinear(np.asarray(image), out_hw[0], out_hw[1])
    if rng.random() < flip_prob:
        img = hflip(img)
    img = 2.0 * img - 1.0
    img -= np.asarray(mean, dtype=img.dtype).reshape(3, 1, 1)
    if rng.random() < erase_prob:
        img, _ = random_erase(img, rng, erase_area, erase_aspect)
    return img


def preprocess(image: np.ndarray, mean, out_hw=(160, 64)) -> np.ndarray:
    """Deterministic eval-time transform: resize, scale to [-1,1], center."""
    img = resize_bilinear(np.asarray(image), out_hw[0], out_hw[1])
    img = 2.0 * img - 1.0
    img -= np.asarray(mean, dtype=img.dtype).reshape(3, 1, 1)
    return img


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample augmentation stream, independent of batch composition."""
    return np.random.default_rng(np.random.SeedSequence((seed, epoch, index)))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Deterministic sample permutation for one epoch."""
    # two-element entropy cannot collide with the three-element sample streams
    rng = np.random.default_rng(np.random.SeedSequence((seed, epoch)))
    return rng.permutation(n)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    train_acc: float
    val_rank1: float

    def line(self) -> str:
        return (f"{self.epoch}\t{self.lr:.10g}\t{self.loss:.6f}"
                f"\t{self.train_acc:.4f}\t{self.val_rank1:.4f}")


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_rank1: float = -1.0
    best_state: Optional[dict] = None

    def lines(self) -> list[str]:
        return [e.line() for e in self.epochs]


def _split_validation(items, val_fraction: float):
    """Hold out one image per identity (or a per-identity fraction) for validation."""
    by_pid: dict[int, list[int]] = {}
    for i, item in enumerate(items):
        by_pid.setdefault(item.pid, []).append(i)
    val_idx = []
    for pid in sorted(by_pid):
        group = by_pid[pid]
        k = max(1, int(round(val_fraction * len(group)))) if val_fraction > 0 else 1
        k = min(k, len(group) - 1) if len(group) > 1 else 0
        val_idx.extend(group[:k])
    val_set = set(val_idx)
    train_idx = [i for i in range(len(items)) if i not in val_set]
    return train_idx, sorted(val_set)


def train(model: TwoBranchModel, dataset, config: TrainConfig, out_dir=None,
          log_fn=None) -> TrainingLog:
    """Train the classifier on a dataset's train split; returns the epoch log.

    `dataset` provides train items (pid + image loader) and the pixel mean;
    see data.TrainData. When `out_dir` is given, writes logs/train.log and
    checkpoints/{final,best}.ckpt under it.
    """
    items = dataset.items
    if not items:
        raise ValueError("training dataset is empty")
    num_ids = len({it.pid for it in items})
    if num_ids < 2:
        raise ValueError("training requires at least 2 identities")

    train_idx, val_idx = _split_validation(items, config.val_fraction)
    images = [dataset.load(i) for i in range(len(items))]
    labels = np.asarray([it.pid for it in items], dtype=np.int64)
    mean_scaled = 2.0 * np.asarray(dataset.mean_rgb, dtype=np.float64) - 1.0

    opt = SGD(
        {
            "backbone": [p for _, p in model.backbone_parameters()],
            "classifier": [p for _, p in model.classifier_parameters()],
        },
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )

    val_batch = None
    if val_idx:
        val_batch = np.stack([
            preprocess(images[i], mean_scaled, config.input_hw) for i in val_idx
        ]).astype(np.float32)
        val_labels = labels[val_idx]

    ckpt_extra = {"mean_rgb": [float(v) for v in dataset.mean_rgb]}
    log = TrainingLog()
    log_lines = []
    best_state = None
    for epoch in range(config.epochs):
        lr_b, lr_c = lr_at(config, epoch)
        order = epoch_order(config.seed, epoch, len(train_idx))
        total_loss = 0.0
        total_hits = 0
        for start in range(0, len(order), config.batch_size):
            chunk = [train_idx[j] for j in order[start : start + config.batch_size]]
            batch = np.stack([
                augment(images[i], sample_rng(config.seed, epoch, i), mean_scaled,
                        config.input_hw, config.flip_prob, config.erase_prob,
                        config.erase_area, config.erase_aspect)
                for i in chunk
            ]).astype(np.float32)
            y = labels[chunk]
            logits, _ = model.forward(Tensor(batch), train=True)
            loss = mul(cross_entropy(logits, y), 1.0 / len(chunk))
            loss.backward()
            opt.step({"backbone": lr_b, "classifier": lr_c})
            total_loss += float(loss.data) * len(chunk)
            total_hits += int((logits.data.argmax(axis=1) == y).sum())

        val_rank1 = 0.0
        if val_batch is not None:
            with no_grad():
                val_logits, _ = model.forward(Tensor(val_batch), train=False)
            val_rank1 = float((val_logits.data.argmax(axis=1) == val_labels).mean())

        stats = EpochStats(epoch, lr_b, total_loss / len(order), total_hits / len(order), val_rank1)
        log.epochs.append(stats)
        log_lines.append(stats.line())
        if log_fn:
            log_fn(stats.line())
        stop = config.early_stop_acc is not None and stats.train_acc >= config.early_stop_acc
        if val_rank1 > log.best_val_rank1:
            log.best_val_rank1 = val_rank1
            log.best_epoch = epoch
            if out_dir is not None:
                _ensure_layout(out_dir)
                save_checkpoint(model, os.path.join(out_dir, "checkpoints", "best.ckpt"),
                                epoch, extra=ckpt_extra)
            else:
                best_state = _snapshot(model)
        if stop:
            break

    if out_dir is not None:
        _ensure_layout(out_dir)
        save_checkpoint(model, os.path.join(out_dir, "checkpoints", "final.ckpt"),
                        log.epochs[-1].epoch, extra=ckpt_extra)
        with open(os.path.join(out_dir, "logs", "train.log"), "w") as fh:
            fh.write("\n".join(log_lines) + "\n")
    log.best_state = best_state
    return log


def _ensure_layout(out_dir) -> None:
    for sub in ("checkpoints", "logs"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)


def _snapshot(model: TwoBranchModel) -> dict:
    state = {name: p.data.copy() for name, p in model.named_parameters()}
    state.update({"buffer:" + name: b.copy() for name, b in model.named_buffers()})
    return state
