"""Shared test fixtures: reachable mask states and per-op gradient cases."""

import numpy as np

import oracles
from vitprune import tensor as T
from vitprune.groups import apply_removal, build_groups, mask_bits
from vitprune.model import MaskSet
from vitprune.pruner import PruneSchedule, eligible
from vitprune.tensor import Tensor


def random_masks(spec, rng, removals, sched=None, kinds=None):
    """A reachable mask state: ``removals`` random eligible group removals."""
    sched = sched or PruneSchedule()
    groups = build_groups(spec, sched.sizes, sched.alignment, kinds or sched.kinds)
    masks = MaskSet.ones(spec)
    removed = []
    for _ in range(removals):
        cands = [g for g in groups if g not in removed and eligible(g, masks, sched)
                 and mask_bits(g, masks).any()]
        if not cands:
            break
        g = cands[int(rng.integers(len(cands)))]
        apply_removal(masks, g)
        removed.append(g)
    return masks, removed


def p64(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


OPS = ["matmul", "batched_matmul", "softmax", "log_softmax", "gelu", "exp", "log", "layernorm",
       "masked_layernorm", "cross_entropy", "kl_div", "getitem", "concat", "transpose", "mean",
       "broadcast"]


def op_case(name, rng):
    """Scalar function exercising one op, and the float64 leaves to probe."""
    a, b = p64(rng, 3, 4), p64(rng, 4, 2)
    w = Tensor(rng.standard_normal((3, 4)))
    if name == "matmul":
        c = Tensor(rng.standard_normal((3, 2)))
        return (lambda: T.tsum(T.matmul(a, b) * c)), [a, b]
    if name == "batched_matmul":
        x, y = p64(rng, 2, 3, 4), p64(rng, 2, 4, 5)
        c = Tensor(rng.standard_normal((2, 3, 5)))
        return (lambda: T.tsum(T.matmul(x, y) * c)), [x, y]
    if name == "softmax":
        return (lambda: T.tsum(T.softmax(a) * w)), [a]
    if name == "log_softmax":
        return (lambda: T.tsum(T.log_softmax(a) * w)), [a]
    if name == "gelu":
        return (lambda: T.tsum(T.gelu(a) * w)), [a]
    if name == "exp":
        return (lambda: T.tsum(T.exp(a) * w)), [a]
    if name == "log":
        pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True, dtype=np.float64)
        return (lambda: T.tsum(T.log(pos) * w)), [pos]
    if name in ("layernorm", "masked_layernorm"):
        g, be = p64(rng, 4), p64(rng, 4)
        m = np.array([1.0, 0.0, 1.0, 1.0]) if name == "masked_layernorm" else None
        return (lambda: T.tsum(T.layernorm(a, g, be, 1e-6, m) * w)), [a, g, be]
    if name == "cross_entropy":
        return (lambda: T.cross_entropy(a, np.array([0, 3, 1]))), [a]
    if name == "kl_div":
        p = Tensor(oracles.softmax(rng.standard_normal((3, 4))))
        return (lambda: T.kl_div(T.log_softmax(a), p)), [a]
    if name == "getitem":
        return (lambda: T.tsum(a[:, 1:3] * Tensor(np.ones((3, 2)) * 2.0))), [a]
    if name == "concat":
        c2 = p64(rng, 3, 2)
        c = Tensor(rng.standard_normal((3, 6)))
        return (lambda: T.tsum(T.concat([a, c2], axis=1) * c)), [a, c2]
    if name == "transpose":
        return (lambda: T.tsum(a.T * Tensor(np.arange(12.0).reshape(4, 3)))), [a]
    if name == "mean":
        return (lambda: T.mean(a * a)), [a]
    if name == "broadcast":
        v = p64(rng, 4)
        return (lambda: T.tsum(T.broadcast_leading(v, (3,)) * w)), [v]
    raise KeyError(name)
