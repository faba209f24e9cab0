"""DEIT-style ViT with independently sized EMB / H / QK / V / MLP.

Attention weights are stored head-first (``q_w[h, qk, emb]``,
``proj_w[h, emb, v]``) so whole heads and per-head widths can be sliced
directly.  Structural masks act on activations: a masked model computes
exactly what the recompiled, smaller dense model computes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .arch import ArchSpec, BlockSpec
from .tensor import Tensor

LN_EPS = 1e-6


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

@dataclass
class MaskSet:
    """Binary keep-vectors for every prunable axis.

    ``qk`` and ``v`` are stored per head (``[h, qk]``); in head-aligned mode
    every surviving head carries the same row.
    """

    emb: np.ndarray
    h: list[np.ndarray]
    qk: list[np.ndarray]
    v: list[np.ndarray]
    mlp: list[np.ndarray]

    @classmethod
    def ones(cls, spec: ArchSpec) -> "MaskSet":
        return cls(
            emb=np.ones(spec.emb, dtype=bool),
            h=[np.ones(b.h, dtype=bool) for b in spec.blocks],
            qk=[np.ones((b.h, b.qk), dtype=bool) for b in spec.blocks],
            v=[np.ones((b.h, b.v), dtype=bool) for b in spec.blocks],
            mlp=[np.ones(b.mlp, dtype=bool) for b in spec.blocks],
        )

    def copy(self) -> "MaskSet":
        return MaskSet(self.emb.copy(), [m.copy() for m in self.h], [m.copy() for m in self.qk],
                       [m.copy() for m in self.v], [m.copy() for m in self.mlp])

    @property
    def num_blocks(self) -> int:
        return len(self.h)

    def arrays(self):
        yield "emb", self.emb
        for i in range(self.num_blocks):
            yield f"h.{i}", self.h[i]
            yield f"qk.{i}", self.qk[i]
            yield f"v.{i}", self.v[i]
            yield f"mlp.{i}", self.mlp[i]

    def all_ones(self) -> bool:
        return all(a.all() for _, a in self.arrays())

    def alive_heads(self, i: int) -> np.ndarray:
        return self.h[i] & self.v[i].any(axis=1)

    def is_head_aligned(self) -> bool:
        for i in range(self.num_blocks):
            alive = self.alive_heads(i)
            if alive.sum() > 1:
                for rows in (self.qk[i][alive], self.v[i][alive]):
                    if not (rows == rows[0]).all():
                        return False
        return True

    def block_dims(self, i: int) -> tuple[int, int, int, int]:
        """(h, qk, v, mlp) of block ``i``; unequal heads are padded to the widest."""
        alive = self.alive_heads(i)
        h = int(alive.sum())
        if h:
            qk = int(self.qk[i][alive].sum(axis=1).max())
            v = int(self.v[i][alive].sum(axis=1).max())
        else:
            qk = int(self.qk[i].any(axis=0).sum())
            v = int(self.v[i].any(axis=0).sum())
        return h, qk, v, int(self.mlp[i].sum())

    def live_emb(self) -> int:
        return int(self.emb.sum())

    def dims(self) -> list[tuple[int, int, int, int, int]]:
        e = self.live_emb()
        return [(e, *self.block_dims(i)) for i in range(self.num_blocks)]

    def dominates(self, other: "MaskSet") -> bool:
        """True when every bit kept here is also kept in ``other`` (monotone pruning)."""
        return all(not (a & ~b).any() for (_, a), (_, b) in zip(self.arrays(), other.arrays()))

    def to_dict(self) -> dict:
        return {k: {"shape": list(a.shape), "bits": a.astype(int).reshape(-1).tolist()}
                for k, a in self.arrays()}

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSet":
        def arr(k):
            return np.asarray(d[k]["bits"], dtype=bool).reshape(d[k]["shape"])
        nb = sum(1 for k in d if k.startswith("h."))
        return cls(emb=arr("emb"), h=[arr(f"h.{i}") for i in range(nb)],
                   qk=[arr(f"qk.{i}") for i in range(nb)], v=[arr(f"v.{i}") for i in range(nb)],
                   mlp=[arr(f"mlp.{i}") for i in range(nb)])

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskSet) or self.num_blocks != other.num_blocks:
            return False
        return all(a.shape == b.shape and (a == b).all()
                   for (_, a), (_, b) in zip(self.arrays(), other.arrays()))


def spec_from_masks(spec: ArchSpec, masks: MaskSet) -> ArchSpec:
    blocks = []
    for i in range(spec.num_blocks):
        h, qk, v, mlp = masks.block_dims(i)
        blocks.append(BlockSpec(h=h, qk=max(qk, 1), v=max(v, 1), mlp=mlp))
    return spec.with_blocks(blocks, emb=masks.live_emb())


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def param_shapes(spec: ArchSpec) -> dict[str, tuple[int, ...]]:
    e = spec.emb
    shapes = {
        "patch_w": (e, spec.patch_dim),
        "patch_b": (e,),
        "cls_token": (e,),
        "dist_token": (e,),
        "pos_embed": (spec.num_tokens, e),
    }
    for i, b in enumerate(spec.blocks):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1_g": (e,), p + "ln1_b": (e,),
            p + "q_w": (b.h, b.qk, e), p + "q_b": (b.h, b.qk),
            p + "k_w": (b.h, b.qk, e), p + "k_b": (b.h, b.qk),
            p + "v_w": (b.h, b.v, e), p + "v_b": (b.h, b.v),
            p + "proj_w": (b.h, e, b.v), p + "proj_b": (e,),
            p + "ln2_g": (e,), p + "ln2_b": (e,),
            p + "fc1_w": (b.mlp, e), p + "fc1_b": (b.mlp,),
            p + "fc2_w": (e, b.mlp), p + "fc2_b": (e,),
        })
    shapes.update({
        "norm_g": (e,), "norm_b": (e,),
        "head_w": (spec.num_classes, e), "head_b": (spec.num_classes,),
        "head_dist_w": (spec.num_classes, e), "head_dist_b": (spec.num_classes,),
    })
    return shapes


# linear weights eligible for 2:4 sparsification (input axis is last)
SPARSIFIABLE = ("q_w", "k_w", "v_w", "proj_w", "fc1_w", "fc2_w")


def init_params(spec: ArchSpec, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(spec).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            a = np.ones(shape)
        elif leaf.endswith("_b"):
            a = np.zeros(shape)
        else:
            a = np.clip(rng.standard_normal(shape), -2.0, 2.0) * 0.02
        out[name] = a.astype(dtype)
    return out


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    b, c, hh, ww = images.shape
    gh, gw = hh // patch, ww // patch
    x = images.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, c * patch * patch))


class ViT:
    """Parameters, structural masks and optional 2:4 masks of one model."""

    def __init__(self, spec: ArchSpec, params: dict[str, np.ndarray],
                 masks: MaskSet | None = None, sparsity: dict[str, np.ndarray] | None = None):
        shapes = param_shapes(spec)
        if set(shapes) != set(params):
            raise ValueError("parameter names do not match the spec")
        for k, s in shapes.items():
            if params[k].shape != s:
                raise ValueError(f"{k}: shape {params[k].shape} != {s}")
        self.spec = spec
        self.params = {k: Tensor(params[k], requires_grad=True) for k in shapes}
        self.masks = masks if masks is not None else MaskSet.ones(spec)
        self.sparsity = sparsity

    @classmethod
    def create(cls, spec: ArchSpec, seed: int = 0, dtype=np.float32) -> "ViT":
        return cls(spec, init_params(spec, seed, dtype))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self, dtype=None) -> "ViT":
        params = {k: (v.data.astype(dtype) if dtype else v.data.copy()) for k, v in self.params.items()}
        sp = {k: v.copy() for k, v in self.sparsity.items()} if self.sparsity else None
        return ViT(self.spec, params, self.masks.copy(), sp)

    @property
    def dtype(self):
        return self.params["patch_w"].dtype

    def __call__(self, images, **kw):
        return self.forward(images, **kw)

    # -- forward ------------------------------------------------------------

    def _w(self, name: str) -> Tensor:
        w = self.params[name]
        if self.sparsity is not None and name in self.sparsity:
            return T.mul(w, self.sparsity[name].astype(w.dtype))
        return w

    def forward(self, images, masks: MaskSet | None | str = "self", return_attn: bool = False) -> dict:
        """Logits of the class and distillation tokens.

        ``masks="self"`` applies the model's own masks; ``masks=None`` runs the
        plain dense path.
        """
        spec = self.spec
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[1:] != (spec.in_chans, spec.image_size, spec.image_size):
            raise ValueError(f"expected images [B, {spec.in_chans}, {spec.image_size}, "
                             f"{spec.image_size}], got {images.shape}")
        if isinstance(masks, str):
            masks = self.masks
        if masks is not None and masks.all_ones():
            masks = None
        dt = self.dtype
        bsz = images.shape[0]
        n, e = spec.num_tokens, spec.emb
        emb_m = None
        if masks is not None and not masks.emb.all():
            emb_m = masks.emb.astype(dt)

        x = T.matmul(Tensor(patchify(images.astype(dt), spec.patch_size)), self._w("patch_w").T)
        x = x + self.params["patch_b"]
        cls = T.broadcast_leading(self.params["cls_token"].reshape(1, e), (bsz,))
        dist = T.broadcast_leading(self.params["dist_token"].reshape(1, e), (bsz,))
        x = T.concat([cls, dist, x], axis=1) + self.params["pos_embed"]
        if emb_m is not None:
            x = x * emb_m

        attn_maps = []
        for i, blk in enumerate(spec.blocks):
            p = f"blocks.{i}."
            x, attn = self._attention(x, i, blk, p, masks, emb_m, return_attn)
            attn_maps.append(attn)
            x = self._mlp(x, i, blk, p, masks, emb_m)

        x = T.layernorm(x, self.params["norm_g"], self.params["norm_b"], LN_EPS, emb_m)
        z_c = T.matmul(x[:, 0], self.params["head_w"].T) + self.params["head_b"]
        z_d = T.matmul(x[:, 1], self.params["head_dist_w"].T) + self.params["head_dist_b"]
        out = {"z_c": z_c, "z_d": z_d}
        if return_attn:
            out["attn"] = attn_maps
        return out

    def _attention(self, x, i, blk: BlockSpec, p, masks, emb_m, return_attn):
        bsz, n, e = x.shape
        h, qk, v = blk.h, blk.qk, blk.v
        if h == 0:
            return x, (np.zeros((0, n, n), dtype=x.dtype) if return_attn else None)
        dt = x.dtype
        qk_m = v_m = None
        alive = np.ones(h, dtype=bool)
        if masks is not None:
            alive = masks.alive_heads(i)
            if not alive.any():
                return x, (np.zeros((h, n, n), dtype=dt) if return_attn else None)
            if not masks.qk[i].all():
                qk_m = masks.qk[i]
            vm = masks.v[i] & masks.h[i][:, None]
            if not vm.all():
                v_m = vm
        y = T.layernorm(x, self.params[p + "ln1_g"], self.params[p + "ln1_b"], LN_EPS, emb_m)

        def project(name, width):
            w = self._w(p + name + "_w").reshape(h * width, e).T
            return T.matmul(y, w) + self.params[p + name + "_b"].reshape(h * width)

        q = project("q", qk)
        k = project("k", qk)
        val = project("v", v)
        if qk_m is None:
            q = q * (1.0 / math.sqrt(qk))
        else:
            live = qk_m.sum(axis=1, keepdims=True).astype(np.float64)
            scale = np.where(live > 0, 1.0 / np.sqrt(np.maximum(live, 1.0)), 0.0)
            q = q * (qk_m * scale).reshape(-1).astype(dt)
        if v_m is not None:
            val = val * v_m.reshape(-1).astype(dt)
        q = q.reshape(bsz, n, h, qk).transpose(0, 2, 1, 3)
        k = k.reshape(bsz, n, h, qk).transpose(0, 2, 3, 1)
        val = val.reshape(bsz, n, h, v).transpose(0, 2, 1, 3)
        attn = T.softmax(T.matmul(q, k), axis=-1)
        o = T.matmul(attn, val).transpose(0, 2, 1, 3).reshape(bsz, n, h * v)
        wp = self._w(p + "proj_w").transpose(0, 2, 1).reshape(h * v, e)
        o = T.matmul(o, wp) + self.params[p + "proj_b"]
        if emb_m is not None:
            o = o * emb_m
        amap = None
        if return_attn:
            amap = attn.data.mean(axis=0) * alive[:, None, None]
        return x + o, amap

    def _mlp(self, x, i, blk: BlockSpec, p, masks, emb_m):
        if blk.mlp == 0:
            return x
        mlp_m = None
        if masks is not None:
            if not masks.mlp[i].any():
                return x
            if not masks.mlp[i].all():
                mlp_m = masks.mlp[i].astype(x.dtype)
        y = T.layernorm(x, self.params[p + "ln2_g"], self.params[p + "ln2_b"], LN_EPS, emb_m)
        hdn = T.gelu(T.matmul(y, self._w(p + "fc1_w").T) + self.params[p + "fc1_b"])
        if mlp_m is not None:
            hdn = hdn * mlp_m
        o = T.matmul(hdn, self._w(p + "fc2_w").T) + self.params[p + "fc2_b"]
        if emb_m is not None:
            o = o * emb_m
        return x + o


# ---------------------------------------------------------------------------
# recompilation
# ---------------------------------------------------------------------------

def _index_plan(spec: ArchSpec, masks: MaskSet) -> dict[str, tuple]:
    """Per-parameter numpy index that extracts the surviving sub-tensor."""
    e = np.flatnonzero(masks.emb)
    plan = {
        "patch_w": np.ix_(e, np.arange(spec.patch_dim)),
        "patch_b": (e,), "cls_token": (e,), "dist_token": (e,),
        "pos_embed": np.ix_(np.arange(spec.num_tokens), e),
        "norm_g": (e,), "norm_b": (e,),
        "head_w": np.ix_(np.arange(spec.num_classes), e), "head_b": (slice(None),),
        "head_dist_w": np.ix_(np.arange(spec.num_classes), e), "head_dist_b": (slice(None),),
    }
    for i in range(spec.num_blocks):
        p = f"blocks.{i}."
        alive = np.flatnonzero(masks.alive_heads(i))
        if alive.size:
            qk = np.flatnonzero(masks.qk[i][alive[0]])
            v = np.flatnonzero(masks.v[i][alive[0]])
        else:
            qk = np.flatnonzero(masks.qk[i].any(axis=0))[:0]
            v = qk
        m = np.flatnonzero(masks.mlp[i])
        plan.update({
            p + "ln1_g": (e,), p + "ln1_b": (e,), p + "ln2_g": (e,), p + "ln2_b": (e,),
            p + "q_w": np.ix_(alive, qk, e), p + "q_b": np.ix_(alive, qk),
            p + "k_w": np.ix_(alive, qk, e), p + "k_b": np.ix_(alive, qk),
            p + "v_w": np.ix_(alive, v, e), p + "v_b": np.ix_(alive, v),
            p + "proj_w": np.ix_(alive, e, v), p + "proj_b": (e,),
            p + "fc1_w": np.ix_(m, e), p + "fc1_b": (m,),
            p + "fc2_w": np.ix_(e, m), p + "fc2_b": (e,),
        })
    return plan


def recompile(model: ViT, masks: MaskSet | None = None) -> ViT:
    """Materialise the masked model as a smaller dense model with the same function."""
    masks = model.masks if masks is None else masks
    if not masks.is_head_aligned():
        raise ValueError("recompile needs head-aligned masks; unequal heads can only be "
                         "costed by padding (see latency.block_dims)")
    spec = model.spec
    new_spec = spec_from_masks(spec, masks)
    plan = _index_plan(spec, masks)
    params = {k: np.ascontiguousarray(model.params[k].data[plan[k]]) for k in plan}
    shapes = param_shapes(new_spec)
    for k in shapes:
        if params[k].size == 0:
            params[k] = params[k].reshape(shapes[k])
    sparsity = None
    if model.sparsity:
        sparsity = {k: np.ascontiguousarray(m[plan[k]]).reshape(shapes[k])
                    for k, m in model.sparsity.items()}
    return ViT(new_spec, params, None, sparsity)
