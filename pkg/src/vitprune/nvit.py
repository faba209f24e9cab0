"""NViT architecture rule and dimension-trend comparison.

Per-block dims are driven by the embedding width and a per-block scaling
factor eps:

    first / last block : H = 10,          QK = EMB/10,     V = 64, MLP = 3*EMB
    intermediate       : H = eps*EMB/100, QK = eps*EMB/20, V = 64, MLP = 3*eps*EMB

H rounds to the nearest even number (>= 2), QK to the nearest multiple of 8
(>= 8); exact halves round up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .arch import ArchSpec, BlockSpec


def round_to_multiple(x: float, step: int, minimum: int) -> int:
    """Nearest multiple of ``step``; halfway cases go up."""
    r = int(math.floor(x / step + 0.5)) * step
    return max(minimum, r)


def boosted_blocks(num_blocks: int) -> range:
    """Blocks that get eps = 2: the middle half of the stack.

    For 12 blocks this is 0-based 3..8, i.e. blocks 4-9 counted from one.
    """
    return range(math.ceil(num_blocks / 4), (3 * num_blocks) // 4)


@dataclass
class NvitRule:
    emb: int
    num_blocks: int = 12
    epsilon_map: dict[int, float] | None = None
    end_heads: int = 10
    value_dim: int = 64

    def epsilon(self, i: int) -> float:
        if self.epsilon_map is not None and i in self.epsilon_map:
            return self.epsilon_map[i]
        return 2.0 if i in boosted_blocks(self.num_blocks) else 1.0


def generate(rule: NvitRule, **spec_kw) -> ArchSpec:
    if rule.emb <= 0:
        raise ValueError("emb must be positive")
    e = rule.emb
    blocks = []
    for i in range(rule.num_blocks):
        if i == 0 or i == rule.num_blocks - 1:
            h = rule.end_heads
            qk = round_to_multiple(e / 10, 8, 8)
            mlp = 3 * e
        else:
            eps = rule.epsilon(i)
            h = round_to_multiple(eps * e / 100, 2, 2)
            qk = round_to_multiple(eps * e / 20, 8, 8)
            mlp = int(round(eps * e * 3))
        blocks.append(BlockSpec(h=h, qk=qk, v=rule.value_dim, mlp=mlp))
    return ArchSpec(emb=e, blocks=tuple(blocks), **spec_kw)


# ---------------------------------------------------------------------------
# trend comparison
# ---------------------------------------------------------------------------

def _middle_mask(n: int) -> np.ndarray:
    m = np.zeros(n, dtype=bool)
    m[list(boosted_blocks(n))] = True
    return m


def trend_checks(spec: ArchSpec, v_rel_threshold: float = 0.25) -> dict[str, bool]:
    """Boolean checks of the dimension trends seen in pruned ViTs.

    - ``h_middle_gt_ends`` / ``qk_middle_gt_ends`` / ``mlp_middle_gt_ends``:
      mean over the middle half of the stack exceeds the mean over the rest.
    - ``v_nearly_constant``: V's coefficient of variation is below the threshold.
    - ``ends_gt_neighbors``: first and last blocks carry more MACs-relevant
      width (H*QK + H*V + MLP) than their immediate neighbours.
    """
    n = spec.num_blocks
    mid = _middle_mask(n)
    dims = {k: np.array([getattr(b, k) for b in spec.blocks], dtype=float)
            for k in ("h", "qk", "v", "mlp")}
    out = {}
    for k in ("h", "qk", "mlp"):
        d = dims[k]
        out[f"{k}_middle_gt_ends"] = bool(mid.any() and (~mid).any()
                                          and d[mid].mean() > d[~mid].mean())
    v = dims["v"]
    out["v_nearly_constant"] = bool(v.mean() > 0 and v.std() / v.mean() < v_rel_threshold)
    width = dims["h"] * dims["qk"] + dims["h"] * dims["v"] + dims["mlp"]
    out["ends_gt_neighbors"] = bool(n >= 3 and width[0] > width[1] and width[-1] > width[-2])
    return out


def compare_trend(generated: ArchSpec, pruned: ArchSpec) -> dict:
    """Per-block dimension curves of both models plus trend booleans of each."""
    def curves(spec):
        return {k: [getattr(b, k) for b in spec.blocks] for k in ("h", "qk", "v", "mlp")}

    return {
        "generated": {"emb": generated.emb, **curves(generated), "trends": trend_checks(generated)},
        "pruned": {"emb": pruned.emb, **curves(pruned), "trends": trend_checks(pruned)},
    }
