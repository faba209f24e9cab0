"""Greedy global pruning loop: train, score, drop the cheapest group, repeat."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .arch import ArchSpec
from .data import Dataset
from .groups import (ALIGNMENT_MODES, DEFAULT_GROUP_SIZES, KIND_ORDER, KINDS, PruneGroup,
                     apply_removal, build_groups, group_coords, mask_bits)
from .importance import ImportanceLedger, argmin_group, default_divisors, model_grads
from .latency import LatencyLUT, model_latency
from .losses import LossConfig
from .model import MaskSet, ViT, recompile
from .train import LR_BASE_FINETUNE, AdamW, labels_teacher, scaled_lr, train_step

logger = logging.getLogger(__name__)

SELECTORS = ("taylor", "random")


@dataclass
class PruneSchedule:
    interval: int = 100
    groups_per_removal: int = 1
    target_speedup: float = 2.0
    component_filter: str = "ALL"
    alignment: str = "head_aligned"
    max_steps: int = 100_000
    max_removals: int | None = None   # baseline runs: stop after this many removals
    min_emb: int = 16
    allow_empty_h: bool = True
    allow_empty_mlp: bool = True
    selector: str = "taylor"
    decay: float = 0.9
    eta: float | None = None          # None: calibrate at the first removal event
    eta_fraction: float = 0.1
    h_div: float = 6.0
    emb_div: float | None = None      # None: number of blocks
    group_sizes: dict[str, int] = field(default_factory=dict)
    batch_size: int = 64
    lr_base: float = LR_BASE_FINETUNE
    lr: float | None = None
    weight_decay: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if self.groups_per_removal < 1:
            raise ValueError("groups_per_removal must be >= 1")
        if not self.target_speedup >= 1.0:
            raise ValueError("target_speedup must be >= 1")
        if self.component_filter != "ALL" and self.component_filter not in KINDS:
            raise ValueError(f"component_filter must be ALL or one of {KINDS}")
        if self.alignment not in ALIGNMENT_MODES:
            raise ValueError(f"alignment must be one of {ALIGNMENT_MODES}")
        if self.selector not in SELECTORS:
            raise ValueError(f"selector must be one of {SELECTORS}")
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")

    @property
    def kinds(self) -> tuple[str, ...]:
        return KINDS if self.component_filter == "ALL" else (self.component_filter,)

    @property
    def sizes(self) -> dict[str, int]:
        return {**DEFAULT_GROUP_SIZES, **self.group_sizes}

    @property
    def peak_lr(self) -> float:
        return self.lr if self.lr is not None else scaled_lr(self.lr_base, self.batch_size)


# single-component mode: 32 units per removal, per-kind interval
SINGLE_COMPONENT_INTERVALS = {"EMB": 1000, "MLP": 50, "QK": 200, "V": 200}


def single_component(kind: str, **kw) -> PruneSchedule:
    if kind not in SINGLE_COMPONENT_INTERVALS:
        raise ValueError(f"no single-component preset for {kind}")
    kw.setdefault("interval", SINGLE_COMPONENT_INTERVALS[kind])
    return PruneSchedule(component_filter=kind, group_sizes={kind: 32}, **kw)


# ---------------------------------------------------------------------------
# legality
# ---------------------------------------------------------------------------

@dataclass
class FloorReport:
    ok: bool
    violations: list[str]

    def __bool__(self) -> bool:
        return self.ok


def structural_floor_check(masks: MaskSet, divisor: int = 16) -> FloorReport:
    """Every surviving linear dim (emb, mlp, h*qk, h*v per block) divisible by ``divisor``."""
    bad = []
    e = masks.live_emb()
    if e % divisor:
        bad.append(f"emb={e}")
    for i in range(masks.num_blocks):
        alive = masks.alive_heads(i)
        qk_tot = int((masks.qk[i] & alive[:, None]).sum())
        v_tot = int((masks.v[i] & alive[:, None]).sum())
        mlp = int(masks.mlp[i].sum())
        for label, d in (("mlp", mlp), ("h*qk", qk_tot), ("h*v", v_tot)):
            if d % divisor:
                bad.append(f"block {i} {label}={d}")
    return FloorReport(not bad, bad)


def group_size_violations(spec: ArchSpec, sizes: dict[str, int], divisor: int = 16,
                          min_emb: int = 16) -> list[dict]:
    """Exhaustively enumerate every dim reachable by removing whole groups and
    return the combinations whose linear dims break ``divisor``."""
    sizes = {**DEFAULT_GROUP_SIZES, **sizes}

    def reach(full, step, low):
        return sorted({max(full - k * step, 0) for k in range(full // step + 2)} - set(range(low)))

    bad = []
    for e in reach(spec.emb, sizes["EMB"], min_emb):
        if e and e % divisor:
            bad.append({"emb": e})
    for i, b in enumerate(spec.blocks):
        for m in reach(b.mlp, sizes["MLP"], 0):
            if m % divisor:
                bad.append({"block": i, "mlp": m})
        for h, qk, v in itertools.product(reach(b.h, sizes["H"], 1),
                                          reach(b.qk, sizes["QK"], 1), reach(b.v, sizes["V"], 1)):
            if (h * qk) % divisor or (h * v) % divisor:
                bad.append({"block": i, "h": h, "qk": qk, "v": v})
    return bad


def _live_after(masks: MaskSet, group: PruneGroup) -> int:
    """Live units left on ``group``'s axis once it is removed."""
    bits = mask_bits(group, masks)
    if group.kind == "EMB":
        return masks.live_emb() - int(bits.sum())
    i = group.block
    if group.kind == "H":
        return int(masks.alive_heads(i).sum()) - int((bits & masks.alive_heads(i)[group.start:group.stop]).sum())
    if group.kind == "MLP":
        return int(masks.mlp[i].sum()) - int(bits.sum())
    arr = masks.qk[i] if group.kind == "QK" else masks.v[i]
    alive = masks.alive_heads(i)
    if group.head is None:
        return int(arr[alive].any(axis=0).sum()) - int(bits[alive].any(axis=0).sum())
    return int(arr[group.head].sum()) - int(bits.sum())


def eligible(group: PruneGroup, masks: MaskSet, sched: PruneSchedule) -> bool:
    """Removal keeps the structural floors."""
    left = _live_after(masks, group)
    if group.kind == "EMB":
        return left >= sched.min_emb
    if group.kind == "H":
        return sched.allow_empty_h or left >= 1
    if group.kind == "MLP":
        return sched.allow_empty_mlp or left >= 1
    # QK/V keep at least one group while the block still has heads
    return left >= 1


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class PruneResult:
    model: ViT                       # original shape, final masks applied
    pruned: ViT | None               # dense recompiled model (head-aligned runs only)
    masks: MaskSet
    history: list[dict]
    status: str                      # reached | floor | max_steps | max_removals
    speedup: float
    removals: int
    eta: float | None


def _zero_group(model: ViT, opt: AdamW, group: PruneGroup) -> None:
    for name, idx in group_coords(group, model.spec):
        model.params[name].data[idx] = 0.0
        opt.m[name][idx] = 0.0
        opt.v[name][idx] = 0.0


def _dims_rows(masks: MaskSet) -> list[list[int]]:
    return [list(d) for d in masks.dims()]


def run(model: ViT, data: Dataset, sched: PruneSchedule, loss_cfg: LossConfig, lut: LatencyLUT,
        full_teacher: ViT | None = None, cnn_teacher: Callable = labels_teacher,
        log: Callable[[dict], None] | None = None) -> PruneResult:
    """Prune ``model`` in place (through its masks) until the LUT speedup reaches the target."""
    spec = model.spec
    if not model.masks.all_ones():
        raise ValueError("run expects an unpruned model")
    masks = model.masks
    if loss_cfg.needs_full_teacher and full_teacher is None:
        full_teacher = model.copy()
    groups = build_groups(spec, sched.sizes, sched.alignment, sched.kinds)
    ledger = ImportanceLedger(spec, groups, default_divisors(spec.num_blocks, sched.h_div, sched.emb_div),
                              decay=sched.decay, eta=sched.eta)
    opt = AdamW(model.params, sched.peak_lr, weight_decay=sched.weight_decay)
    rng = np.random.default_rng([sched.seed, 7])
    stream = data.stream(sched.batch_size, sched.seed)
    history: list[dict] = []

    def emit(rec):
        history.append(rec)
        if log is not None:
            log(rec)

    lat0 = model_latency(lut, masks)
    lat = lat0
    speedup = 1.0
    emit({"event": "start", "schedule": asdict(sched), "loss": asdict(loss_cfg),
          "spec": spec.to_dict(), "latency": lat0, "groups": len(groups), "dims": _dims_rows(masks)})

    def on_grads(m: ViT):
        ledger.accumulate(ledger.step_scores(m.state(), model_grads(m)))

    status = "max_steps"
    removals = 0
    step = 0
    if speedup >= sched.target_speedup:
        status = "reached"
    elif sched.max_removals == 0:
        status = "max_removals"
    while status == "max_steps" and step < sched.max_steps:
        x, y = next(stream)
        loss = train_step(model, opt, x, y, loss_cfg, sched.peak_lr, full_teacher, cnn_teacher,
                          on_grads if sched.selector == "taylor" else None)
        step += 1
        emit({"event": "step", "step": step, "loss": loss})
        if step < sched.interval or step % sched.interval:
            continue
        for _ in range(sched.groups_per_removal):
            cands = {gid: g for gid, g in ledger.active.items() if eligible(g, masks, sched)}
            if not cands:
                status = "floor"
                logger.warning("no eligible groups left at speedup %.3f (target %.3f)",
                               speedup, sched.target_speedup)
                break
            ledger.refresh_savings(lut, masks)
            if sched.selector == "taylor" and ledger.eta is None:
                ledger.calibrate_eta(sched.eta_fraction)
                emit({"event": "calibrate", "step": step, "eta": ledger.eta,
                      "fraction": sched.eta_fraction})
            scores = ledger.scores(cands)
            if sched.selector == "taylor":
                gid = argmin_group(scores, cands)
            else:
                ids = sorted(cands, key=lambda k: cands[k].sort_key)
                gid = ids[int(rng.integers(len(ids)))]
            g = ledger.remove(gid)
            apply_removal(masks, g)
            _zero_group(model, opt, g)
            retired = ledger.retire_dead(masks)
            before = lat
            lat = model_latency(lut, masks)
            speedup = lat0 / lat if lat > 0 else math.inf
            removals += 1
            emit({"event": "removal", "step": step, "index": removals, "group": gid,
                  "kind": g.kind, "block": g.block, "slice": g.slice,
                  "taylor": ledger.taylor[gid], "saving": ledger.saving[gid],
                  "score": scores[gid], "eta": ledger.eta, "selector": sched.selector,
                  "scores": scores, "retired": retired,
                  "latency_before": before, "latency": lat, "speedup": speedup,
                  "dims": _dims_rows(masks)})
            if speedup >= sched.target_speedup:
                status = "reached"
                break
            if sched.max_removals is not None and removals >= sched.max_removals:
                status = "max_removals"
                break
    pruned = recompile(model, masks) if masks.is_head_aligned() else None
    emit({"event": "end", "status": status, "steps": step, "removals": removals,
          "speedup": speedup, "latency": lat, "eta": ledger.eta, "dims": _dims_rows(masks)})
    return PruneResult(model, pruned, masks, history, status, speedup, removals, ledger.eta)


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

def _sort_key_of(gid: str) -> tuple[int, int, int]:
    kind, block, sl = gid.split(":")
    return (KIND_ORDER[kind], -1 if block == "*" else int(block), int(sl))


def replay_removals(history: list[dict]) -> list[str]:
    """Re-derive each Taylor removal from its logged scores; returns mismatch messages."""
    problems = []
    for ev in history:
        if ev.get("event") != "removal":
            continue
        scores = ev["scores"]
        if ev["group"] not in scores:
            problems.append(f"removal {ev['index']}: {ev['group']} not among candidates")
            continue
        if ev["selector"] != "taylor":
            continue
        best = min(scores, key=lambda k: (scores[k], _sort_key_of(k)))
        if best != ev["group"]:
            problems.append(f"removal {ev['index']}: logged {ev['group']}, argmin {best}")
    return problems


def replay_masks(spec: ArchSpec, history: list[dict], sched: PruneSchedule | None = None) -> MaskSet:
    """Masks reconstructed from the removal events alone."""
    start = next(ev for ev in history if ev["event"] == "start")
    sched = sched or PruneSchedule(**{k: v for k, v in start["schedule"].items()})
    groups = {g.id: g for g in build_groups(spec, sched.sizes, sched.alignment, sched.kinds)}
    masks = MaskSet.ones(spec)
    for ev in history:
        if ev.get("event") == "removal":
            apply_removal(masks, groups[ev["group"]])
    return masks


# ---------------------------------------------------------------------------
# head-aligned vs concatenated
# ---------------------------------------------------------------------------

def alignment_comparison(spec: ArchSpec, lut: LatencyLUT, kind: str = "QK", removals: int = 1,
                         group_size: int = 8, seed: int = 0) -> dict:
    """Latency of head-aligned vs concatenated removal at equal parameter count.

    Aligned removes ``removals`` slices from every head of every block; the
    concatenated variant removes the same number of per-head slices but picks
    the heads at random, so widths differ and the block is costed at its
    widest head.
    """
    rng = np.random.default_rng(seed)
    aligned = MaskSet.ones(spec)
    concat = MaskSet.ones(spec)
    for i, b in enumerate(spec.blocks):
        width = b.qk if kind == "QK" else b.v
        nslices = width // group_size
        if removals >= nslices:
            raise ValueError("removals must leave at least one slice per head")
        arr_a = aligned.qk[i] if kind == "QK" else aligned.v[i]
        arr_c = concat.qk[i] if kind == "QK" else concat.v[i]
        arr_a[:, (nslices - removals) * group_size:] = False
        # same total count of slices, distributed randomly over heads
        left = np.full(b.h, nslices)
        for _ in range(removals * b.h):
            choices = np.flatnonzero(left > 1)
            hh = int(rng.choice(choices))
            left[hh] -= 1
        for hh in range(b.h):
            arr_c[hh, left[hh] * group_size:] = False

    def live(m: MaskSet) -> int:
        return sum(int(m.qk[i].sum() + m.v[i].sum()) for i in range(m.num_blocks))

    return {"aligned_latency": model_latency(lut, aligned), "concat_latency": model_latency(lut, concat),
            "aligned_live": live(aligned), "concat_live": live(concat),
            "concat_is_aligned": concat.is_head_aligned()}
