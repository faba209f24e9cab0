"""Optimiser, learning-rate schedule, training and evaluation loops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Dataset
from .losses import LossConfig, loss_total
from .model import ViT

logger = logging.getLogger(__name__)

# lr = base * batch_size / 512
LR_BASE_FINETUNE = 0.0002
LR_BASE_SCRATCH = 0.0005


def scaled_lr(base: float, batch_size: int) -> float:
    return base * batch_size / 512.0


def cosine_lr(step: int, total: int, peak: float, warmup: int = 0, floor: float = 0.0) -> float:
    """Linear warmup to ``peak`` then cosine decay to ``floor`` over ``total`` steps."""
    if warmup and step < warmup:
        return peak * (step + 1) / warmup
    if total <= warmup:
        return peak
    t = min(1.0, (step - warmup) / max(1, total - warmup))
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * t))


def _decays(name: str, arr: np.ndarray) -> bool:
    return arr.ndim >= 2 and name != "pos_embed"


class AdamW:
    """Decoupled weight decay Adam; biases, norms, tokens and positions are not decayed."""

    def __init__(self, params: dict[str, T.Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and _decays(k, p.data):
                p.data *= (1.0 - lr * self.weight_decay)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": a for k, a in self.m.items()}
        out.update({f"v.{k}": a for k, a in self.v.items()})
        return out

    def load_state_dict(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for k in self.m:
            self.m[k] = tensors[f"m.{k}"].copy()
            self.v[k] = tensors[f"v.{k}"].copy()
        self.t = t


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr_base: float = LR_BASE_SCRATCH
    lr: float | None = None          # overrides the batch-scaled lr_base when set
    warmup_epochs: int = 5
    weight_decay: float = 0.05
    schedule: str = "cosine"         # cosine | constant
    augment: bool = False
    seed: int = 0

    @property
    def peak_lr(self) -> float:
        return self.lr if self.lr is not None else scaled_lr(self.lr_base, self.batch_size)


def labels_teacher(images, labels):
    """Degenerate CNN teacher: the ground-truth labels."""
    return labels


def model_teacher(teacher: ViT, batch_size: int = 256) -> Callable:
    """Hard labels from a frozen model of this family."""
    def fn(images, labels):
        return predict(teacher, images, batch_size).argmax(axis=1)
    return fn


def predict(model: ViT, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Averaged class/distillation logits (DEIT inference convention)."""
    out = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            o = model(images[s:s + batch_size])
            out.append(0.5 * (o["z_c"].data + o["z_d"].data))
    return np.concatenate(out) if out else np.zeros((0, model.spec.num_classes), np.float32)


def evaluate(model: ViT, ds: Dataset, batch_size: int = 256) -> float:
    if len(ds) == 0:
        return float("nan")
    return float((predict(model, ds.images, batch_size).argmax(axis=1) == ds.labels).mean())


def teacher_logits(teacher: ViT | None, images):
    if teacher is None:
        return None
    with T.no_grad():
        o = teacher(images)
    return {"z_c": o["z_c"].data, "z_d": o["z_d"].data}


def train_step(model: ViT, opt: AdamW, x, y, loss_cfg: LossConfig, lr: float,
               full_teacher: ViT | None = None, cnn_teacher: Callable = labels_teacher,
               on_grads: Callable[[ViT], None] | None = None) -> float:
    out = model(x)
    loss = loss_total(loss_cfg, out, y, cnn_teacher(x, y), teacher_logits(full_teacher, x))
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite loss {float(loss.data)}")
    model.zero_grad()
    loss.backward()
    if on_grads is not None:
        on_grads(model)
    opt.step(lr)
    return float(loss.data)


def train(model: ViT, data: Dataset, cfg: TrainConfig, loss_cfg: LossConfig,
          full_teacher: ViT | None = None, cnn_teacher: Callable = labels_teacher,
          opt: AdamW | None = None, log: Callable[[dict], None] | None = None) -> list[dict]:
    """Epoch loop with warmup + cosine schedule; returns per-epoch metrics."""
    opt = opt or AdamW(model.params, cfg.peak_lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for x, y in data.batches(cfg.batch_size, rng, cfg.augment):
            if cfg.schedule == "cosine":
                lr = cosine_lr(step, total, cfg.peak_lr, warm)
            else:
                lr = cfg.peak_lr
            losses.append(train_step(model, opt, x, y, loss_cfg, lr, full_teacher, cnn_teacher))
            step += 1
        rec = {"epoch": epoch, "loss": float(np.mean(losses)), "train_acc": evaluate(model, data),
               "lr": lr}
        history.append(rec)
        logger.info("epoch %d loss %.4f acc %.4f", epoch, rec["loss"], rec["train_acc"])
        if log is not None:
            log(rec)
    return history
