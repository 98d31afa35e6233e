"""Soft Dice loss, Adam, the step learning-rate schedule, augmentation and the
epoch loop with best-on-validation checkpointing."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from typing import Any, Callable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError, DimensionError
from .layers import Module, save_checkpoint
from .metrics import dice
from .model import CANet, predict_mask
from .tensor import Tape, Tensor, as_tensor, backward, no_grad, softmax, tsum

logger = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    weight_decay: float = 1e-8
    batch_size: int = 4
    epochs: int = 300
    lr_decay: float = 0.5
    lr_step: int = 256
    seed: int = 0
    crop: tuple[int, int] | None = None
    hflip: bool = False
    vflip: bool = False
    rotation: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.crop is not None:
            self.crop = tuple(int(c) for c in self.crop)
        self.validate()

    def validate(self) -> None:
        if self.lr0 < 0 or self.weight_decay < 0:
            raise ConfigError("lr0 and weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1 or self.lr_step < 1:
            raise ConfigError("batch_size, epochs and lr_step must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if not 0 <= self.rotation <= math.pi:
            raise ConfigError(f"rotation bound must lie in [0, pi], got {self.rotation}")
        if self.crop is not None and (len(self.crop) != 2 or min(self.crop) < 1):
            raise ConfigError(f"crop must be a positive (h, w) pair, got {self.crop}")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["crop"] = list(self.crop) if self.crop else None
        return d

    @property
    def augments(self) -> bool:
        return bool(self.crop or self.hflip or self.vflip or self.rotation)


# ----------------------------------------------------------------- loss


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """N×H×W integer labels to N×K×H×W one-hot floats."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=np.float64)
    np.put_along_axis(out, labels[:, None].astype(np.int64), 1.0, axis=1)
    return out


def soft_dice_loss(probs, target, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - mean over images and classes of (2Σpg + s) / (Σp + Σg + s).

    ``probs`` are class probabilities (softmax already applied) and
    ``target`` a one-hot tensor of the same N×K×H×W shape. The background
    class is included in the average.
    """
    probs, target = as_tensor(probs), as_tensor(target)
    if probs.shape != target.shape:
        raise DimensionError(f"soft dice: probs {probs.shape} vs target {target.shape}")
    axes = tuple(range(2, probs.ndim))
    inter = tsum(probs * target, axis=axes)
    denom = tsum(probs, axis=axes) + tsum(target, axis=axes)
    per_class = (inter * 2.0 + smooth) / (denom + smooth)
    return 1.0 - per_class.mean()


def segmentation_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    k = logits.shape[1]
    return soft_dice_loss(softmax(logits, axis=1), one_hot(labels, k))


# ----------------------------------------------------------------- adam


class AdamState:
    """First/second moment buffers and the shared step counter."""

    def __init__(self, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step = 0


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update in place.

    Coupled L2 decay: ``weight_decay * w`` is added to each gradient before
    the moment updates. Parameters whose gradient is ``None`` are treated as
    having zero gradient.
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ContractError("adam_step: params, grads and state disagree in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.data.shape:
            raise ContractError(f"adam_step: state shape {m.shape} != parameter shape {p.data.shape}")
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if g.shape != p.data.shape:
            raise ContractError(f"adam_step: gradient shape {g.shape} != parameter shape {p.data.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_at(epoch: int, config: TrainConfig) -> float:
    return config.lr0 * config.lr_decay ** (epoch // config.lr_step)


# --------------------------------------------------------- augmentation


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Apply identical random geometry to a C×H×W image and its H×W mask.

    Images are rotated bilinearly with zero fill, masks with nearest
    neighbour so no new labels appear.
    """
    h, w = mask.shape
    if config.crop:
        ch, cw = config.crop
        if ch > h or cw > w:
            raise ConfigError(f"crop {ch}×{cw} larger than image {h}×{w}")
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        image = image[:, top : top + ch, left : left + cw]
        mask = mask[top : top + ch, left : left + cw]
    if config.hflip and rng.random() < 0.5:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if config.vflip and rng.random() < 0.5:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    if config.rotation:
        angle = float(rng.uniform(-config.rotation, config.rotation))
        deg = math.degrees(angle)
        image = ndimage.rotate(image, deg, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)
        mask = ndimage.rotate(mask, deg, axes=(1, 0), reshape=False, order=0, mode="constant", cval=0)
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def hflip(image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return image[:, :, ::-1], mask[:, ::-1]


# ----------------------------------------------------------------- loop


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_dice: float
    seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def foreground_dice(masks: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    """Mean Dice over foreground classes and images."""
    scores = [
        dice(masks[i] == k, labels[i] == k)
        for i in range(len(masks))
        for k in range(1, num_classes)
    ]
    return float(np.mean(scores)) if scores else float("nan")


def predict_batches(model: CANet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits, _ = model(images[i : i + batch_size])
            out.append(predict_mask(logits))
    return np.concatenate(out)


def train_step(model: Module, state: AdamState, images: np.ndarray, labels: np.ndarray,
               lr: float, weight_decay: float) -> float:
    model.train()
    model.zero_grad()
    with Tape():
        logits, _ = model(images)
        loss = segmentation_loss(logits, labels)
    backward(loss)
    params = state.params
    adam_step(params, [p.grad for p in params], state, lr, weight_decay)
    return loss.item()


@dataclass
class TrainResult:
    log: list[EpochRecord]
    best_epoch: int
    best_val_dice: float
    best_state: dict


def train(model: CANet, dataset, valset, config: TrainConfig, out_dir=None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Run the epoch loop.

    ``dataset``/``valset`` expose ``images`` (N×C×H×W) and ``masks``
    (N×H×W). The parameters with the best foreground validation Dice are
    restored into ``model`` at the end and, when ``out_dir`` is given, written
    to ``best.ckpt`` alongside ``epochs.jsonl``.
    """
    if len(dataset) == 0 or len(valset) == 0:
        raise ConfigError("training and validation splits must be non-empty")
    from pathlib import Path

    rng = np.random.default_rng(config.seed)
    state = AdamState(model.parameters(), config.beta1, config.beta2, config.adam_eps)
    k = model.config.num_classes
    log: list[EpochRecord] = []
    best = (-1.0, -1, None)
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "epochs.jsonl", "w")
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            lr = lr_at(epoch, config)
            order = rng.permutation(len(dataset))
            losses = []
            for i in range(0, len(order), config.batch_size):
                idx = order[i : i + config.batch_size]
                images, labels = dataset.images[idx], dataset.masks[idx]
                if config.augments:
                    pairs = [augment(im, lb, rng, config) for im, lb in zip(images, labels)]
                    images = np.stack([p[0] for p in pairs])
                    labels = np.stack([p[1] for p in pairs])
                losses.append(train_step(model, state, images, labels, lr, config.weight_decay) * len(idx))
            train_loss = float(np.sum(losses) / len(order))
            val_masks = predict_batches(model, valset.images, config.batch_size)
            val_dice = foreground_dice(val_masks, valset.masks, k)
            rec = EpochRecord(epoch, lr, train_loss, val_dice, time.perf_counter() - t0)
            log.append(rec)
            if log_fh:
                log_fh.write(rec.to_json() + "\n")
                log_fh.flush()
            logger.info("epoch %d lr %.3g loss %.5f val dice %.4f", epoch, lr, train_loss, val_dice)
            if on_epoch:
                on_epoch(rec)
            if val_dice > best[0]:
                best = (val_dice, epoch, {n: a.copy() for n, a in model.state_dict().items()})
                if out_dir is not None:
                    save_model(out_dir / "best.ckpt", model)
    finally:
        if log_fh:
            log_fh.close()
    model.load_state_dict(best[2])
    return TrainResult(log, best[1], best[0], best[2])


def save_model(path, model: CANet) -> None:
    save_checkpoint(path, model.state_dict(), {"model": model.config.to_dict()})


def load_model(path) -> CANet:
    from .layers import load_checkpoint
    from .model import ModelConfig, build

    state, meta = load_checkpoint(path)
    if "model" not in meta:
        raise ConfigError(f"{path}: checkpoint has no model config block")
    model = build(ModelConfig.from_dict(meta["model"]), seed=0)
    model.load_state_dict(state)
    model.eval()
    return model
