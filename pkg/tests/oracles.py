"""Independent reference implementations used as test oracles.

Nothing here imports the package's math; every routine is written directly
against numpy in float64 so it can check the autodiff engine, the model and
the LUT by a second route.
"""

import itertools
import math

import numpy as np
from scipy.special import erf


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits, labels):
    p = softmax(logits)
    return float(np.mean([-math.log(p[i, y]) for i, y in enumerate(labels)]))


def kl(p_target, q):
    """Batch-mean sum p log(p / q)."""
    total = 0.0
    for pr, qr in zip(np.asarray(p_target, np.float64), np.asarray(q, np.float64)):
        for a, b in zip(pr, qr):
            if a > 0:
                total += a * (math.log(a) - math.log(b))
    return total / len(p_target)


def layernorm(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def vit_forward(spec, params, images, ln_eps=1e-6):
    """Dense float64 forward written per head with explicit loops over heads."""
    P = {k: np.asarray(v, np.float64) for k, v in params.items()}
    x = np.asarray(images, np.float64)
    bsz, c, hh, ww = x.shape
    p = spec.patch_size
    g = hh // p
    patches = x.reshape(bsz, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(bsz, g * g, c * p * p)
    tok = patches @ P["patch_w"].T + P["patch_b"]
    cls = np.broadcast_to(P["cls_token"], (bsz, 1, spec.emb))
    dist = np.broadcast_to(P["dist_token"], (bsz, 1, spec.emb))
    x = np.concatenate([cls, dist, tok], axis=1) + P["pos_embed"]
    for i, blk in enumerate(spec.blocks):
        q = f"blocks.{i}."
        if blk.h:
            y = layernorm(x, P[q + "ln1_g"], P[q + "ln1_b"], ln_eps)
            out = np.zeros_like(x)
            for h in range(blk.h):
                qh = y @ P[q + "q_w"][h].T + P[q + "q_b"][h]
                kh = y @ P[q + "k_w"][h].T + P[q + "k_b"][h]
                vh = y @ P[q + "v_w"][h].T + P[q + "v_b"][h]
                a = softmax(qh @ kh.transpose(0, 2, 1) / math.sqrt(blk.qk))
                out += (a @ vh) @ P[q + "proj_w"][h].T
            x = x + out + P[q + "proj_b"]
        if blk.mlp:
            y = layernorm(x, P[q + "ln2_g"], P[q + "ln2_b"], ln_eps)
            x = x + gelu(y @ P[q + "fc1_w"].T + P[q + "fc1_b"]) @ P[q + "fc2_w"].T + P[q + "fc2_b"]
    x = layernorm(x, P["norm_g"], P["norm_b"], ln_eps)
    return (x[:, 0] @ P["head_w"].T + P["head_b"], x[:, 1] @ P["head_dist_w"].T + P["head_dist_b"])


def corner_sum(axes, values, point):
    """Multilinear interpolation as an explicit weighted sum over the 2**d cell corners."""
    lo, frac = [], []
    for ax, q in zip(axes, point):
        ax = np.asarray(ax, np.float64)
        j = int(np.searchsorted(ax, q, side="right") - 1)
        j = min(max(j, 0), len(ax) - 2)
        lo.append(j)
        frac.append((q - ax[j]) / (ax[j + 1] - ax[j]))
    total = 0.0
    for bits in itertools.product((0, 1), repeat=len(axes)):
        w = 1.0
        for b, t in zip(bits, frac):
            w *= t if b else (1.0 - t)
        total += w * values[tuple(j + b for j, b in zip(lo, bits))]
    return total


def block_macs(emb, h, qk, v, mlp, n):
    """Per-block multiply-accumulates counted layer by layer."""
    q_k = 2 * n * emb * (h * qk)          # Q and K projections
    val = n * emb * (h * v)               # V projection
    scores = h * n * n * qk               # Q K^T
    mix = h * n * n * v                   # A V
    proj = n * (h * v) * emb              # output projection
    ffn = n * emb * mlp + n * mlp * emb   # fc1, fc2
    return q_k + val + scores + mix + proj + ffn
