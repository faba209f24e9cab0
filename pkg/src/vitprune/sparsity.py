"""2:4 magnitude sparsity along the reduction (last) axis of linear weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import SPARSIFIABLE, ViT


def mask_2to4(w: np.ndarray) -> np.ndarray:
    """Keep the two largest |w| of every aligned 4-group on the last axis.

    Ties zero the lower index first, i.e. among equal magnitudes the higher
    index is kept.
    """
    w = np.asarray(w)
    if w.shape[-1] % 4:
        raise ValueError(f"last dimension {w.shape[-1]} is not divisible by 4")
    g = np.abs(w).reshape(-1, 4)
    # stable sort on |w|: equal magnitudes keep index order, so the lower index sorts first
    order = np.argsort(g, axis=1, kind="stable")
    mask = np.ones_like(g, dtype=bool)
    np.put_along_axis(mask, order[:, :2], False, axis=1)
    return mask.reshape(w.shape)


def apply_2to4(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = mask_2to4(w)
    return np.where(mask, w, 0).astype(np.asarray(w).dtype), mask


@dataclass
class SparsityReport:
    ok: bool
    reason: str = ""
    row: tuple | None = None       # index of the offending group's row
    group: int | None = None       # group index along the last axis

    def __bool__(self) -> bool:
        return self.ok


def verify_2to4(w: np.ndarray, divisor: int = 16) -> SparsityReport:
    """Every aligned 4-group has at least two zeros and both dims are ``divisor``-legal.

    Accepts a weight matrix or a boolean keep-mask.
    """
    w = np.asarray(w)
    if w.ndim == 0:
        return SparsityReport(False, "scalar input")
    if w.shape[-1] % 4:
        return SparsityReport(False, f"last dim {w.shape[-1]} is not divisible by 4")
    for ax, d in enumerate(w.shape[-2:]):
        if d % divisor:
            return SparsityReport(False, f"dim {d} on axis {ax} is not divisible by {divisor}")
    nz = (w != 0).reshape(*w.shape[:-1], w.shape[-1] // 4, 4).sum(axis=-1)
    bad = np.argwhere(nz > 2)
    if len(bad):
        first = tuple(int(i) for i in bad[0])
        return SparsityReport(False, f"group has {int(nz[first])} nonzeros", first[:-1], first[-1])
    return SparsityReport(True)


def _is_sparsifiable(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in SPARSIFIABLE


def sparsify(model: ViT) -> dict[str, np.ndarray]:
    """Attach 2:4 masks to every block linear with a non-empty reduction axis.

    Weights themselves are zeroed too, so the stored tensors carry the pattern.
    """
    masks = {}
    for name, p in model.params.items():
        if not _is_sparsifiable(name) or p.data.size == 0:
            continue
        sparse, m = apply_2to4(p.data)
        p.data[...] = sparse
        masks[name] = m
    model.sparsity = masks
    return masks


def verify_model(model: ViT, divisor: int = 16) -> dict[str, SparsityReport]:
    """Pattern report per sparsified tensor (2-D view ``[rows, reduction]``)."""
    out = {}
    for name, p in model.params.items():
        if not _is_sparsifiable(name) or p.data.size == 0:
            continue
        w = p.data
        if model.sparsity and name in model.sparsity:
            w = w * model.sparsity[name]
        out[name] = verify_2to4(as_linear(name, w), divisor)
    return out


def as_linear(name: str, w: np.ndarray) -> np.ndarray:
    """2-D ``[out, in]`` view of a head-layout weight.

    ``q/k/v_w [h, d, emb]`` -> ``[h*d, emb]``; ``proj_w [h, emb, v]`` -> ``[emb, h*v]``.
    Per-head widths are multiples of 4, so 4-groups never straddle heads.
    """
    if w.ndim == 2:
        return w
    if name.endswith("proj_w"):
        h, e, v = w.shape
        return w.transpose(1, 0, 2).reshape(e, h * v)
    return w.reshape(-1, w.shape[-1])
