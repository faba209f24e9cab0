"""Taylor importance of structural groups and the latency-aware ledger.

    taylor(S)        = (sum_{s in S} g_s * w_s)**2 / divisor(kind)
    latency_aware(S) = ema(taylor(S)) - eta * (Lat(W) - Lat(W \\ S))
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .arch import ArchSpec
from .groups import PruneGroup, apply_removal, group_coords, is_dead
from .latency import LatencyLUT, block_dims
from .model import MaskSet, ViT


def default_divisors(num_blocks: int, h_div: float = 6.0, emb_div: float | None = None) -> dict[str, float]:
    return {"EMB": float(num_blocks if emb_div is None else emb_div), "H": float(h_div),
            "QK": 1.0, "V": 1.0, "MLP": 1.0}


def group_taylor(group: PruneGroup, weights: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                 spec: ArchSpec, divisor: float = 1.0) -> float:
    total = 0.0
    for name, idx in group_coords(group, spec):
        g = grads.get(name)
        if g is None:
            raise ValueError(f"no gradient for {name}; run backward first")
        total += float(np.sum(weights[name][idx].astype(np.float64) * g[idx]))
    return total * total / divisor


def model_grads(model: ViT) -> dict[str, np.ndarray]:
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in model.params.items()}


def exact_perturbation(group: PruneGroup, model: ViT, loss_fn: Callable[[ViT], float]) -> float:
    """(L(W | w_S = 0) - L(W))**2 by literally zeroing the group's weights."""
    coords = group_coords(group, model.spec)

    def value():
        out = loss_fn(model)
        return float(out.data if isinstance(out, T.Tensor) else out)
    saved = [(name, idx, model.params[name].data[idx].copy()) for name, idx in coords]
    with T.no_grad():
        base = value()
        try:
            for name, idx, _ in saved:
                model.params[name].data[idx] = 0.0
            pert = value()
        finally:
            for name, idx, val in saved:
                model.params[name].data[idx] = val
    return (pert - base) ** 2


def removal_saving(lut: LatencyLUT, masks: MaskSet, group: PruneGroup,
                   base_blocks: np.ndarray | None = None) -> float:
    """Lat(current) - Lat(current without ``group``)."""
    before = lut.query(block_dims(masks)) if base_blocks is None else base_blocks
    after_masks = masks.copy()
    apply_removal(after_masks, group)
    after = lut.query(block_dims(after_masks))
    return float(before.sum() - after.sum())


@dataclass
class ImportanceLedger:
    """Smoothed importance for every active group.

    Scores start at zero and follow ``s <- decay * s + (1 - decay) * new``.
    Removed and retired groups leave permanently.
    """

    spec: ArchSpec
    groups: list[PruneGroup]
    divisors: dict[str, float]
    decay: float = 0.9
    eta: float | None = None
    taylor: dict[str, float] = field(default_factory=dict)
    saving: dict[str, float] = field(default_factory=dict)
    removed: list[str] = field(default_factory=list)
    retired: list[str] = field(default_factory=list)
    updates: int = 0

    def __post_init__(self):
        self.active: dict[str, PruneGroup] = {g.id: g for g in self.groups}
        for gid in self.active:
            self.taylor.setdefault(gid, 0.0)
            self.saving.setdefault(gid, 0.0)
        self._coords = {gid: group_coords(g, self.spec) for gid, g in self.active.items()}

    def step_scores(self, weights: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, float]:
        """Raw (divided) Taylor score of every active group for one step."""
        prods = {}
        out = {}
        for gid, g in self.active.items():
            total = 0.0
            for name, idx in self._coords[gid]:
                if name not in prods:
                    prods[name] = weights[name].astype(np.float64) * grads[name]
                total += float(prods[name][idx].sum())
            out[gid] = total * total / self.divisors[g.kind]
        return out

    def accumulate(self, step_scores: dict[str, float]) -> None:
        d = self.decay
        for gid in self.active:
            self.taylor[gid] = d * self.taylor[gid] + (1.0 - d) * step_scores[gid]
        self.updates += 1

    def refresh_savings(self, lut: LatencyLUT, masks: MaskSet) -> None:
        base = lut.query(block_dims(masks))
        for gid, g in self.active.items():
            self.saving[gid] = removal_saving(lut, masks, g, base)

    def calibrate_eta(self, fraction: float = 0.1) -> float:
        """Pick eta so the median latency penalty is ``fraction`` of the median Taylor score."""
        tay = np.median([self.taylor[g] for g in self.active])
        sav = np.median([self.saving[g] for g in self.active])
        self.eta = float(fraction * tay / sav) if sav > 0 else 0.0
        return self.eta

    def latency_aware(self, gid: str) -> float:
        eta = self.eta or 0.0
        return self.taylor[gid] - eta * self.saving[gid]

    def scores(self, ids: Iterable[str] | None = None) -> dict[str, float]:
        ids = self.active if ids is None else ids
        return {gid: self.latency_aware(gid) for gid in ids}

    def remove(self, gid: str) -> PruneGroup:
        g = self.active.pop(gid)
        self.removed.append(gid)
        return g

    def retire_dead(self, masks: MaskSet) -> list[str]:
        dead = [gid for gid, g in self.active.items() if is_dead(g, masks)]
        for gid in dead:
            del self.active[gid]
            self.retired.append(gid)
        return dead


def latency_aware(group: PruneGroup, ledger: ImportanceLedger, lut: LatencyLUT,
                  current_masks: MaskSet) -> float:
    """Smoothed Taylor score minus eta times the group's LUT latency saving."""
    saving = removal_saving(lut, current_masks, group)
    return ledger.taylor[group.id] - (ledger.eta or 0.0) * saving


def argmin_group(scores: dict[str, float], groups: dict[str, PruneGroup]) -> str:
    """Minimum score; ties go to the lowest (kind, block, slice)."""
    return min(scores, key=lambda gid: (scores[gid], groups[gid].sort_key))


def spearman(a, b) -> float:
    from scipy.stats import spearmanr
    return float(spearmanr(a, b).statistic)
