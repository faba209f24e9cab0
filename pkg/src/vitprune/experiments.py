"""Desk-scale experiment: Taylor-guided vs random-group pruning at equal removal count."""

from __future__ import annotations

from dataclasses import dataclass

from . import arch, data, latency, pruner
from . import train as tr
from .losses import LossConfig
from .model import ViT


@dataclass
class EfficacyConfig:
    num_classes: int = 8
    n_train: int = 512
    n_test: int = 512
    noise: float = 1.6
    pretrain_epochs: int = 20
    pretrain_lr: float = 1e-3
    batch_size: int = 32
    interval: int = 10
    prune_lr: float = 1e-4
    target_speedup: float = 2.0
    finetune_epochs: int = 5
    finetune_lr: float = 2e-4


def efficacy_trial(seed: int, cfg: EfficacyConfig = EfficacyConfig()) -> dict:
    """Train a desk model, prune it twice (Taylor, then random with the same
    removal count and schedule), finetune both and report test accuracy."""
    spec = arch.desk(num_classes=cfg.num_classes)
    train_set, test_set = data.synthetic_split(cfg.num_classes, cfg.n_train, cfg.n_test, spec.image_size,
                                               spec.in_chans, cfg.noise, seed=seed)
    base = ViT.create(spec, seed=seed)
    tr.train(base, train_set, tr.TrainConfig(epochs=cfg.pretrain_epochs, batch_size=cfg.batch_size,
                                             lr=cfg.pretrain_lr, warmup_epochs=1, seed=seed),
             LossConfig("ce_only"))
    lut = latency.analytic_lut("desk", tokens=spec.num_tokens)
    loss = LossConfig("proposed")
    out = {"seed": seed, "pretrain_train_acc": tr.evaluate(base, train_set),
           "pretrain_test_acc": tr.evaluate(base, test_set)}
    removals = None
    for selector in ("taylor", "random"):
        model = base.copy()
        sched = pruner.PruneSchedule(interval=cfg.interval, target_speedup=cfg.target_speedup,
                                     selector=selector, batch_size=cfg.batch_size, lr=cfg.prune_lr,
                                     seed=seed, max_removals=removals)
        if selector == "random":
            sched.target_speedup = float("inf")
        res = pruner.run(model, train_set, sched, loss, lut, full_teacher=base)
        removals = res.removals
        pruned = res.pruned
        tr.train(pruned, train_set, tr.TrainConfig(epochs=cfg.finetune_epochs, batch_size=cfg.batch_size,
                                                   lr=cfg.finetune_lr, warmup_epochs=0, seed=seed),
                 loss, full_teacher=base)
        out[selector] = {"removals": res.removals, "speedup": res.speedup, "status": res.status,
                         "test_acc": tr.evaluate(pruned, test_set)}
    return out
