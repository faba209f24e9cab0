"""Architecture description of a (possibly non-uniform) DEIT-style ViT.

``ArchSpec`` carries the shared embedding width and one ``BlockSpec`` per
transformer block.  Parameter and MAC counts are closed-form functions of it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace


@dataclass(frozen=True)
class BlockSpec:
    h: int
    qk: int
    v: int
    mlp: int

    @property
    def attention_empty(self) -> bool:
        return self.h == 0

    @property
    def mlp_empty(self) -> bool:
        return self.mlp == 0


@dataclass(frozen=True)
class ArchSpec:
    """Per-block dimension table defining one ViT instance.

    ``h == 0`` or ``mlp == 0`` mark a branch that was pruned away entirely;
    that branch then acts as a pure residual pass-through.
    """

    emb: int
    blocks: tuple[BlockSpec, ...]
    patch_size: int = 16
    image_size: int = 224
    num_classes: int = 1000
    in_chans: int = 3

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.emb < 1:
            raise ValueError("emb must be >= 1")
        if not self.blocks:
            raise ValueError("at least one block is required")
        for i, b in enumerate(self.blocks):
            if b.h < 0 or b.mlp < 0 or b.qk < 1 or b.v < 1:
                raise ValueError(f"block {i}: invalid dims {b}")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        if min(self.patch_size, self.num_classes, self.in_chans) < 1:
            raise ValueError("patch_size, num_classes and in_chans must be >= 1")

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        # class + distillation token
        return self.num_patches + 2

    @property
    def patch_dim(self) -> int:
        return self.in_chans * self.patch_size ** 2

    def is_ampere_legal(self) -> bool:
        """True when every linear in/out width is divisible by 16."""
        if self.emb % 16:
            return False
        return all(b.mlp % 16 == 0 and (b.qk * b.h) % 16 == 0 and (b.v * b.h) % 16 == 0
                   for b in self.blocks)

    def with_blocks(self, blocks, emb: int | None = None) -> "ArchSpec":
        return replace(self, blocks=tuple(blocks), emb=self.emb if emb is None else emb)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        d["blocks"] = tuple(BlockSpec(**b) for b in d["blocks"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def uniform(emb: int, depth: int, heads: int, head_dim: int, mlp: int, **kw) -> ArchSpec:
    block = BlockSpec(heads, head_dim, head_dim, mlp)
    return ArchSpec(emb=emb, blocks=(block,) * depth, **kw)


def deit_base(**kw) -> ArchSpec:
    return uniform(768, 12, 12, 64, 3072, **kw)


def deit_small(**kw) -> ArchSpec:
    return uniform(384, 12, 6, 64, 1536, **kw)


def deit_tiny(**kw) -> ArchSpec:
    return uniform(192, 12, 3, 64, 768, **kw)


def desk(**kw) -> ArchSpec:
    """Minutes-scale reference model: 32px images, 8px patches, 4 blocks."""
    kw = {"patch_size": 8, "image_size": 32, "num_classes": 10, **kw}
    return uniform(64, 4, 4, 16, 128, **kw)


PRESETS = {
    "deit_b": deit_base,
    "deit_s": deit_small,
    "deit_t": deit_tiny,
    "desk": desk,
}


# ---------------------------------------------------------------------------
# counting
# ---------------------------------------------------------------------------

def block_params(emb: int, b: BlockSpec) -> int:
    attn = 0
    if b.h:
        attn = 2 * (emb * b.h * b.qk + b.h * b.qk) + (emb * b.h * b.v + b.h * b.v) + b.h * b.v * emb
    mlp = 0
    if b.mlp:
        mlp = emb * b.mlp + b.mlp + b.mlp * emb
    # two layernorms, proj bias and fc2 bias are kept even for emptied branches
    return attn + mlp + 4 * emb + emb + emb


def count_params(spec: ArchSpec) -> int:
    """Parameters including patch embed, tokens, positions, norms and both heads."""
    e = spec.emb
    total = e * spec.patch_dim + e            # patch embedding
    total += 2 * e                            # class + distillation tokens
    total += spec.num_tokens * e              # positional embedding
    total += sum(block_params(e, b) for b in spec.blocks)
    total += 2 * e                            # final norm
    total += 2 * (e * spec.num_classes + spec.num_classes)
    return total


def block_macs(emb: float, h: float, qk: float, v: float, mlp: float, tokens: int) -> float:
    """Multiply-accumulates of one block on ``tokens`` tokens (batch 1)."""
    n = tokens
    proj_qk = 2 * n * emb * h * qk
    proj_v = n * emb * h * v
    scores = n * n * h * qk
    mix = n * n * h * v
    proj_out = n * h * v * emb
    mlp_ = 2 * n * emb * mlp
    return proj_qk + proj_v + scores + mix + proj_out + mlp_


def blocks_macs(spec: ArchSpec) -> int:
    return int(sum(block_macs(spec.emb, b.h, b.qk, b.v, b.mlp, spec.num_tokens) for b in spec.blocks))


def count_flops(spec: ArchSpec) -> int:
    """Whole-model MACs (one MAC = one FLOP) for a single image."""
    patch = spec.num_patches * spec.patch_dim * spec.emb
    heads = 2 * spec.emb * spec.num_classes
    return int(patch + blocks_macs(spec) + heads)
