"""Structural pruning groups and the weight coordinates each one removes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arch import ArchSpec
from .model import MaskSet, param_shapes

KINDS = ("EMB", "H", "QK", "V", "MLP")
KIND_ORDER = {k: i for i, k in enumerate(KINDS)}
DEFAULT_GROUP_SIZES = {"EMB": 16, "H": 2, "QK": 8, "V": 8, "MLP": 16}
ALIGNMENT_MODES = ("head_aligned", "concatenated")


@dataclass(frozen=True)
class PruneGroup:
    """One removable slice: ``[start, stop)`` along ``kind``'s axis.

    ``block`` is -1 for EMB (shared by every block).  ``head`` is set only in
    concatenated mode, where QK/V slices belong to a single head.
    """

    kind: str
    block: int
    slice: int
    start: int
    stop: int
    head: int | None = None

    @property
    def id(self) -> str:
        b = "*" if self.block < 0 else str(self.block)
        return f"{self.kind}:{b}:{self.slice}"

    @property
    def sort_key(self) -> tuple[int, int, int]:
        return (KIND_ORDER[self.kind], self.block, self.slice)

    @property
    def width(self) -> int:
        return self.stop - self.start


def _slices(n: int, size: int):
    for j, s in enumerate(range(0, n, size)):
        yield j, s, min(s + size, n)


def build_groups(spec: ArchSpec, sizes: dict[str, int] | None = None,
                 alignment: str = "head_aligned", kinds=KINDS) -> list[PruneGroup]:
    sizes = {**DEFAULT_GROUP_SIZES, **(sizes or {})}
    if alignment not in ALIGNMENT_MODES:
        raise ValueError(f"alignment must be one of {ALIGNMENT_MODES}")
    out = []
    if "EMB" in kinds:
        out += [PruneGroup("EMB", -1, j, a, b) for j, a, b in _slices(spec.emb, sizes["EMB"])]
    for i, blk in enumerate(spec.blocks):
        if alignment == "head_aligned":
            if "H" in kinds:
                out += [PruneGroup("H", i, j, a, b) for j, a, b in _slices(blk.h, sizes["H"])]
            if "QK" in kinds:
                out += [PruneGroup("QK", i, j, a, b) for j, a, b in _slices(blk.qk, sizes["QK"])]
            if "V" in kinds:
                out += [PruneGroup("V", i, j, a, b) for j, a, b in _slices(blk.v, sizes["V"])]
        else:
            for kind, width in (("QK", blk.qk), ("V", blk.v)):
                if kind not in kinds:
                    continue
                per_head = list(_slices(width, sizes[kind]))
                for hh in range(blk.h):
                    for j, a, b in per_head:
                        out.append(PruneGroup(kind, i, hh * len(per_head) + j, a, b, head=hh))
        if "MLP" in kinds:
            out += [PruneGroup("MLP", i, j, a, b) for j, a, b in _slices(blk.mlp, sizes["MLP"])]
    return sorted(out, key=lambda g: g.sort_key)


def group_coords(group: PruneGroup, spec: ArchSpec) -> list[tuple[str, tuple]]:
    """Every (parameter, index) pair zeroed when ``group`` is removed.

    Indices are basic slices, so coordinates within a group never repeat.
    """
    s = slice(group.start, group.stop)
    all_ = slice(None)
    if group.kind == "EMB":
        coords = [("patch_w", (s, all_)), ("patch_b", (s,)), ("cls_token", (s,)),
                  ("dist_token", (s,)), ("pos_embed", (all_, s))]
        for i in range(spec.num_blocks):
            p = f"blocks.{i}."
            coords += [(p + "ln1_g", (s,)), (p + "ln1_b", (s,)),
                       (p + "q_w", (all_, all_, s)), (p + "k_w", (all_, all_, s)),
                       (p + "v_w", (all_, all_, s)), (p + "proj_w", (all_, s, all_)),
                       (p + "proj_b", (s,)), (p + "ln2_g", (s,)), (p + "ln2_b", (s,)),
                       (p + "fc1_w", (all_, s)), (p + "fc2_w", (s, all_)), (p + "fc2_b", (s,))]
        coords += [("norm_g", (s,)), ("norm_b", (s,)), ("head_w", (all_, s)),
                   ("head_dist_w", (all_, s))]
        return coords
    p = f"blocks.{group.block}."
    if group.kind == "H":
        return [(p + n, (s,)) for n in ("q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "proj_w")]
    hd = all_ if group.head is None else group.head
    if group.kind == "QK":
        return [(p + "q_w", (hd, s, all_)), (p + "q_b", (hd, s)),
                (p + "k_w", (hd, s, all_)), (p + "k_b", (hd, s))]
    if group.kind == "V":
        return [(p + "v_w", (hd, s, all_)), (p + "v_b", (hd, s)), (p + "proj_w", (hd, all_, s))]
    if group.kind == "MLP":
        return [(p + "fc1_w", (s, all_)), (p + "fc1_b", (s,)), (p + "fc2_w", (all_, s))]
    raise ValueError(f"unknown group kind {group.kind}")


def live_param_masks(spec: ArchSpec, masks: MaskSet) -> dict[str, np.ndarray]:
    """Boolean mask per parameter marking coordinates that are still in use."""
    e = masks.emb
    shapes = param_shapes(spec)
    out = {
        "patch_w": np.broadcast_to(e[:, None], shapes["patch_w"]),
        "patch_b": e, "cls_token": e, "dist_token": e,
        "pos_embed": np.broadcast_to(e[None, :], shapes["pos_embed"]),
        "norm_g": e, "norm_b": e,
        "head_w": np.broadcast_to(e[None, :], shapes["head_w"]),
        "head_dist_w": np.broadcast_to(e[None, :], shapes["head_dist_w"]),
        "head_b": np.ones(shapes["head_b"], dtype=bool),
        "head_dist_b": np.ones(shapes["head_dist_b"], dtype=bool),
    }
    for i in range(spec.num_blocks):
        p = f"blocks.{i}."
        alive = masks.alive_heads(i)
        qkm = masks.qk[i] & alive[:, None]
        vm = masks.v[i] & alive[:, None]
        m = masks.mlp[i]
        out.update({
            p + "ln1_g": e, p + "ln1_b": e, p + "ln2_g": e, p + "ln2_b": e,
            p + "proj_b": e, p + "fc2_b": e,
            p + "q_w": qkm[:, :, None] & e, p + "q_b": qkm,
            p + "k_w": qkm[:, :, None] & e, p + "k_b": qkm,
            p + "v_w": vm[:, :, None] & e, p + "v_b": vm,
            p + "proj_w": vm[:, None, :] & e[None, :, None],
            p + "fc1_w": m[:, None] & e, p + "fc1_b": m,
            p + "fc2_w": e[:, None] & m,
        })
    return out


def live_coord_count(group: PruneGroup, spec: ArchSpec, masks: MaskSet,
                     live: dict[str, np.ndarray] | None = None) -> int:
    live = live if live is not None else live_param_masks(spec, masks)
    return int(sum(live[name][idx].sum() for name, idx in group_coords(group, spec)))


def mask_bits(group: PruneGroup, masks: MaskSet) -> np.ndarray:
    """View of the mask entries this group controls."""
    s = slice(group.start, group.stop)
    if group.kind == "EMB":
        return masks.emb[s]
    if group.kind == "H":
        return masks.h[group.block][s]
    if group.kind == "MLP":
        return masks.mlp[group.block][s]
    arr = masks.qk[group.block] if group.kind == "QK" else masks.v[group.block]
    return arr[:, s] if group.head is None else arr[group.head, s]


def apply_removal(masks: MaskSet, group: PruneGroup) -> None:
    s = slice(group.start, group.stop)
    if group.kind == "EMB":
        masks.emb[s] = False
    elif group.kind == "H":
        masks.h[group.block][s] = False
    elif group.kind == "MLP":
        masks.mlp[group.block][s] = False
    else:
        arr = masks.qk[group.block] if group.kind == "QK" else masks.v[group.block]
        if group.head is None:
            arr[:, s] = False
        else:
            arr[group.head, s] = False


def is_dead(group: PruneGroup, masks: MaskSet) -> bool:
    """Group no longer affects the model (its bits or its heads are gone)."""
    bits = mask_bits(group, masks)
    if group.kind in ("QK", "V"):
        alive = masks.alive_heads(group.block)
        if group.head is None:
            return not alive.any() or not bits.any()
        return not alive[group.head] or not bits.any()
    if group.kind == "H":
        return not (bits & masks.alive_heads(group.block)[group.start:group.stop]).any()
    return not bits.any()
